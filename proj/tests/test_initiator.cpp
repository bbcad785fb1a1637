#include <catch_amalgamated.hpp>

#include "ipstor/error.hpp"
#include "ipstor/initiator.hpp"
#include "support.hpp"

using namespace ipstor;
using support::ideal_link;
using support::SimRig;

namespace {

std::size_t rows_containing(const Trace& trace, std::string_view needle)
{
    std::size_t n = 0;
    for (const auto& r : trace.snapshot())
        n += r.info.find(needle) != std::string::npos;
    return n;
}

TargetConfig chap_target()
{
    TargetConfig cfg = support::small_target();
    cfg.chap = ChapCredentials{"alice", "s3cret-s3cret"};
    return cfg;
}

} // namespace

TEST_CASE("discovery returns the configured target")
{
    SimRig rig;
    const auto targets = discover(rig.net, rig.initiator);
    REQUIRE(targets.size() == 1);
    CHECK(targets[0] == DiscoveredTarget{"iqn.2025-01.lab:disk0", "192.168.2.1:3260,1"});
    rig.net.run();
    CHECK(rig.target->active_sessions() == 0);
}

TEST_CASE("discovery with no targets is empty")
{
    TargetConfig cfg = support::small_target();
    cfg.target_name.clear();
    SimRig rig(SecurityMode::Plain, ideal_link(), cfg);
    CHECK(discover(rig.net, rig.initiator).empty());
}

TEST_CASE("discovery errors")
{
    SimRig rig(SecurityMode::Plain, ideal_link(), chap_target());
    rig.initiator.chap = ChapCredentials{"alice", "not-the-secret"};
    CHECK_THROWS_AS(discover(rig.net, rig.initiator), AuthFailure);

    rig.initiator.chap = ChapCredentials{"alice", "s3cret-s3cret"};
    CHECK(discover(rig.net, rig.initiator).size() == 1);

    InitiatorConfig nowhere = rig.initiator;
    nowhere.portal = Endpoint{"192.168.2.9", 3260};
    CHECK_THROWS_AS(discover(rig.net, nowhere), TransportError);
}

TEST_CASE("login outcomes")
{
    SimRig rig;
    auto s = rig.login();
    CHECK(s->logged_in());
    CHECK(s->next_cmd_sn() == 1);

    try {
        rig.login("iqn.2025-01.lab:missing");
        FAIL("login to an unknown target succeeded");
    } catch (const LoginRejected& e) {
        CHECK(e.status_class() == 2);
        CHECK(e.status_detail() == 3);
    }
}

TEST_CASE("CHAP login in every mode")
{
    for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        SimRig rig(mode, ideal_link(0.0002), chap_target());
        rig.initiator.chap = ChapCredentials{"alice", "s3cret-s3cret"};
        auto s = rig.login();
        CHECK(s->logged_in());
        s->logout();
    }
}

TEST_CASE("wrong CHAP secret moves no data")
{
    SimRig rig(SecurityMode::Plain, ideal_link(0.0002), chap_target());
    rig.initiator.chap = ChapCredentials{"alice", "guess"};
    CHECK_THROWS_AS(rig.login(), AuthFailure);
    rig.net.run();
    for (const auto& r : rig.trace->snapshot())
        CHECK(r.payload_len == 0);
    CHECK(rig.target->active_sessions() == 0);

    rig.initiator.chap.reset();
    CHECK_THROWS_AS(rig.login(), AuthFailure);
}

TEST_CASE("segment size negotiation and Data-Out count")
{
    SimRig rig;
    rig.initiator.max_recv_data_segment = 4096;
    auto s = rig.login();
    CHECK(s->max_data_segment() == 4096);

    rig.trace->clear();
    const Bytes data = support::Gen(3).bytes(8192);
    s->write(0, 0, data);
    CHECK(rows_containing(*rig.trace, "Data Out") == 2);
    CHECK(s->read(0, 0, 16) == data);
    CHECK(rows_containing(*rig.trace, "Data In") == 2);
}

TEST_CASE("cmd_sn advances by one per command")
{
    SimRig rig;
    auto s = rig.login();
    s->nop_ping();
    CHECK(s->next_cmd_sn() == 2);
    s->write(0, 0, Bytes(512, 1));
    CHECK(s->next_cmd_sn() == 3);
    s->read(0, 0, 1);
    CHECK(s->next_cmd_sn() == 4);

    std::vector<std::uint32_t> wire_sns;
    rig.net.set_filter([&](Bytes p, Direction dir) {
        if (dir == Direction::InitiatorToTarget && p.size() >= kPseudoHeaderSize + kBhsSize) {
            const std::uint8_t* bhs = p.data() + kPseudoHeaderSize;
            const auto op = static_cast<std::uint8_t>(bhs[0] & 0x3F);
            if (op == 0x00 || op == 0x01)
                wire_sns.push_back(get_be32(bhs + 24));
        }
        return std::vector<Bytes>{std::move(p)};
    });
    for (int i = 0; i < 5; ++i)
        s->nop_ping();
    s->read(0, 0, 1);
    CHECK(wire_sns == std::vector<std::uint32_t>{4, 5, 6, 7, 8, 9});
}

TEST_CASE("block I/O edge cases")
{
    SimRig rig(SecurityMode::Plain, ideal_link(), support::small_target(64));
    auto s = rig.login();
    CHECK(s->read(0, 3, 4) == Bytes(2048, 0));

    s->write(0, 0, Bytes(512, 0xAB));
    CHECK(s->read(0, 0, 1) == Bytes(512, 0xAB));

    try {
        s->write(0, 64, Bytes(512, 1));
        FAIL("write past capacity succeeded");
    } catch (const StorageError& e) {
        CHECK(e.status() == scsi_status::CheckCondition);
        CHECK(e.sense_key() == 0x05);
        CHECK(e.asc() == 0x21);
    }
    CHECK_THROWS_AS(s->read(0, 63, 2), StorageError);
    CHECK_THROWS_AS(s->read(4, 0, 1), StorageError);
    CHECK_THROWS_AS(s->write(0, 0, Bytes(100)), UsageError);
    CHECK_THROWS_AS(s->write(0, 0, Bytes{}), UsageError);
    CHECK_THROWS_AS(s->read(0, 0, 0), UsageError);
    CHECK(s->logged_in());
    s->nop_ping();
}

TEST_CASE("ping timing on the simulated link")
{
    {
        SimRig rig(SecurityMode::Plain, ideal_link(0.0005));
        auto s = rig.login();
        CHECK(s->nop_ping() == 0.001);
        CHECK(s->nop_ping(support::Gen(1).bytes(16)) == 0.001);
    }
    {
        SimRig rig(SecurityMode::PacketLayer, ideal_link(0.0), support::small_target(), CryptoCostModel{50e-6, 0.0});
        auto s = rig.login();
        CHECK(s->nop_ping() == Catch::Approx(200e-6).margin(1e-12));
        CHECK(std::llround(s->nop_ping() * 1e9) == 200'000);
    }
}

TEST_CASE("logout semantics")
{
    SimRig rig;
    auto s = rig.login();
    s->logout();
    CHECK_FALSE(s->logged_in());
    CHECK_THROWS_AS(s->write(0, 0, Bytes(512)), UsageError);
    CHECK_THROWS_AS(s->nop_ping(), UsageError);
    CHECK_THROWS_AS(s->logout(), UsageError);
    rig.net.run();
    CHECK(rig.target->active_sessions() == 0);
}

TEST_CASE("dropping a session logs out")
{
    SimRig rig;
    {
        auto s = rig.login();
        s->nop_ping();
    }
    rig.net.run();
    CHECK(rig.target->active_sessions() == 0);
    CHECK(rows_containing(*rig.trace, "Logout Response") == 1);
}

TEST_CASE("transport loss during logout is not raised")
{
    SimRig rig;
    auto s = rig.login();
    rig.net.set_filter([](Bytes, Direction) { return std::vector<Bytes>{}; });
    rig.target->stop();
    CHECK_NOTHROW(s->logout());
    CHECK_FALSE(s->logged_in());
}

TEST_CASE("overlapping use of one session is refused")
{
    SimRig rig;
    auto s = rig.login();
    bool refused = false;
    bool tried = false;
    rig.net.set_filter([&](Bytes p, Direction) {
        if (!tried) {
            tried = true;
            try {
                s->nop_ping();
            } catch (const UsageError&) {
                refused = true;
            }
        }
        return std::vector<Bytes>{std::move(p)};
    });
    s->read(0, 0, 1);
    CHECK(tried);
    CHECK(refused);
    rig.net.set_filter(nullptr);
    s->nop_ping();
}

TEST_CASE("read bytes are identical in every mode")
{
    const Bytes data = support::Gen(55).bytes(300 * 512);
    for (auto mode : {SecurityMode::Plain, SecurityMode::RecordLayer, SecurityMode::PacketLayer}) {
        SimRig rig(mode, ideal_link(0.0003));
        auto s = rig.login();
        s->write(0, 100, data);
        CHECK(s->read(0, 100, 300) == data);
    }
}

TEST_CASE("initiator config validation")
{
    InitiatorConfig c;
    CHECK_NOTHROW(c.validate());
    c.initiator_name.clear();
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = InitiatorConfig{};
    c.chap = ChapCredentials{"user", ""};
    CHECK_THROWS_AS(c.validate(), UsageError);
}
