#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lenskit::cli {

// Runs one invocation. args excludes the program name. Returns the exit
// code: 0 success, 1 usage error, 2 data error, 3 numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace lenskit::cli
