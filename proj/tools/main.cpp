#include "cli.hpp"

int main(int argc, char** argv) { return m2fn::cli::run({argv, argv + argc}); }
