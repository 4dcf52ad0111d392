// SPDX-License-Identifier: Apache-2.0
// Regenerates data/sbm/: a three-block SBM in content/cites/split text form.
//   make_sbm_fixture <out-dir>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "lorap/graph.hpp"

int main(int argc, char** argv) {
  if (argc != 2 || argv[1][0] == '-') {
    std::cerr << "usage: make_sbm_fixture <out-dir>\n";
    return 2;
  }
  const std::filesystem::path dir(argv[1]);
  std::filesystem::create_directories(dir);
  const std::vector<std::size_t> blocks{60, 60, 60};
  const lorap::Dataset ds = lorap::synth_sbm(blocks, 0.08, 0.01, 24, 1.2, 7);
  std::ofstream content(dir / "sbm.content"), cites(dir / "sbm.cites"), split(dir / "sbm.split");
  lorap::save_content_cites(ds, content, cites, &split);
  std::cout << ds.graph.num_nodes() << " nodes, " << ds.graph.num_edges() << " directed edges\n";
  return 0;
}
