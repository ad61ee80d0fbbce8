#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "modicf/dataset.hpp"

namespace modicf {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// FMAT: "FMAT" | u32 version (1) | u32 rows | u32 cols | rows*cols f32, all little-endian, row-major.
inline constexpr std::uint32_t kFmatVersion = 1;
void write_fmat(const fs::path& path, const Tensor& matrix);
Tensor read_fmat(const fs::path& path);
// Reads only the header; returns {rows, cols}.
Shape read_fmat_header(const fs::path& path);

nlohmann::json mask_plan_to_json(const MaskPlan& plan);
MaskPlan mask_plan_from_json(const nlohmann::json& j);

// Directory layout:
//   interactions.tsv         user_id \t item_id \t split   (0-based dense ids, header line optional)
//   modalities.json          [{"name", "dim", "file"}, ...] in modality order
//   <file>                   one FMAT per modality
//   mask.json                optional MaskPlan; the indicator matrix is derived from it
//   heldout/<file>           optional pre-mask features (imputation MSE only)
void save_bundle(const DatasetBundle& bundle, const fs::path& dir);
DatasetBundle load_bundle(const fs::path& dir);

// Completed feature matrices plus a <file>.generated.json sidecar listing generated rows.
void export_imputed(const DatasetBundle& completed, const fs::path& dir);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace modicf
