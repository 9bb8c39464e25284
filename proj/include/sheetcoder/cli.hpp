#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace sheetcoder {

/// Entry point of the `sheetcoder` executable. args[0] is the program name.
/// Returns 0 on success, 2 on a usage error and 1 on any other failure.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sheetcoder
