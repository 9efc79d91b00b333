// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "lab.hpp"

int main(int argc, char** argv) { return advfusion::cli::run(argc, argv, std::cout, std::cerr); }
