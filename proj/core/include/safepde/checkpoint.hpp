#pragma once

#include <map>
#include <string>
#include <vector>

#include "safepde/mlp.hpp"

namespace safepde {

struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<double> values;  // row-major
};

// Text checkpoint:
//   CKPT v1 kind=<kind>
//   meta key=value ...
//   <name> <rows> <cols>
//   <row 0 values>
//   ...
struct Checkpoint {
    std::string kind;
    std::map<std::string, std::string> meta;
    std::vector<Tensor> tensors;

    const Tensor& tensor(const std::string& name) const;
    const std::string& meta_value(const std::string& key) const;
};

// Writes to a temporary sibling and renames it into place.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
std::string format_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& text);

// Tensors "<prefix>W<k>", "<prefix>b<k>" plus meta "acts.<prefix>" = comma list.
void append_mlp(Checkpoint& ckpt, const std::string& prefix, const Mlp& mlp);
Mlp extract_mlp(const Checkpoint& ckpt, const std::string& prefix);

Tensor matrix_tensor(const std::string& name, const Eigen::MatrixXd& m);
Eigen::MatrixXd tensor_matrix(const Tensor& t);

void atomic_write_text(const std::string& path, const std::string& text);

}  // namespace safepde
