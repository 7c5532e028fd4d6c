// SPDX-License-Identifier: Apache-2.0
#include "drclf/cli.hpp"

int main(int argc, char** argv) { return drclf::cli::run(argc, argv); }
