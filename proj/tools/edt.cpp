#include <iostream>

#include "edt/app/commands.hpp"

int main(int argc, char** argv) { return edt::app::run_cli(argc, argv, std::cout, std::cerr); }
