#include <iostream>

#include "ipstor/cli.hpp"

int main(int argc, char** argv)
{
    return ipstor::run_cli(argc, argv, std::cout, std::cerr);
}
