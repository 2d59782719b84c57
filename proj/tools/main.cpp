#include "mlda/cli.hpp"

int main(int argc, char** argv) { return mlda::run_cli(argc, argv); }
