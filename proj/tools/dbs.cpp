#include "dbs/cli.hpp"

int main(int argc, char** argv) { return dbs::cli::dispatch(argc, argv); }
