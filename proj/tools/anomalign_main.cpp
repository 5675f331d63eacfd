#include "anomalign/cli.hpp"

int main(int argc, char** argv) {
    return anomalign::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
