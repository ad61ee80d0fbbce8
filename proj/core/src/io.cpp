#include "modicf/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace modicf {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void write_fmat(const fs::path& path, const Tensor& matrix) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write("FMAT", 4);
  put_u32(out, kFmatVersion);
  put_u32(out, static_cast<std::uint32_t>(matrix.rows()));
  put_u32(out, static_cast<std::uint32_t>(matrix.cols()));
  for (Scalar v : matrix.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw FormatError("short write to " + path.string());
}

Shape read_fmat_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<unsigned char, 16> h{};
  in.read(reinterpret_cast<char*>(h.data()), 16);
  if (in.gcount() != 16 || std::memcmp(h.data(), "FMAT", 4) != 0) throw FormatError(path.string() + ": not an FMAT file");
  if (get_u32(h.data() + 4) != kFmatVersion) throw FormatError(path.string() + ": unsupported FMAT version");
  return {get_u32(h.data() + 8), get_u32(h.data() + 12)};
}

Tensor read_fmat(const fs::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "FMAT", 4) != 0) throw FormatError(path.string() + ": not an FMAT file");
  if (get_u32(bytes.data() + 4) != kFmatVersion) throw FormatError(path.string() + ": unsupported FMAT version");
  const std::size_t rows = get_u32(bytes.data() + 8), cols = get_u32(bytes.data() + 12);
  if (bytes.size() != 16 + 4 * rows * cols) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " does not match header " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    t[i] = static_cast<Scalar>(std::bit_cast<float>(get_u32(bytes.data() + 16 + 4 * i)));
  }
  return t;
}

nlohmann::json mask_plan_to_json(const MaskPlan& plan) {
  return {{"mr", plan.mr}, {"seed", plan.seed}, {"assignment", plan.assignment}};
}

MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  MaskPlan p;
  p.mr = j.at("mr").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.assignment = j.at("assignment").get<std::vector<std::vector<std::size_t>>>();
  return p;
}

namespace {

std::string file_name_for(const ModalityFeatures& m) { return m.name + ".fmat"; }

}  // namespace

void save_bundle(const DatasetBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream tsv;
  tsv << "user_id\titem_id\tsplit\n";
  for (const auto& it : bundle.interactions) tsv << it.user << '\t' << it.item << '\t' << split_name(it.split) << '\n';
  write_text(dir / "interactions.tsv", tsv.str());

  nlohmann::json meta = nlohmann::json::array();
  for (const auto& m : bundle.modalities) {
    meta.push_back({{"name", m.name}, {"dim", m.dim()}, {"file", file_name_for(m)}});
    write_fmat(dir / file_name_for(m), m.data);
  }
  write_text(dir / "modalities.json", meta.dump(2) + "\n");

  if (bundle.mask) {
    write_text(dir / "mask.json", mask_plan_to_json(*bundle.mask).dump() + "\n");
  } else if (fs::exists(dir / "mask.json")) {
    fs::remove(dir / "mask.json");
  }
  if (!bundle.heldout.empty()) {
    for (std::size_t m = 0; m < bundle.heldout.size(); ++m) {
      write_fmat(dir / "heldout" / file_name_for(bundle.modalities[m]), bundle.heldout[m].data);
    }
  }
}

DatasetBundle load_bundle(const fs::path& dir) {
  const fs::path tsv_path = dir / "interactions.tsv";
  const fs::path meta_path = dir / "modalities.json";
  if (!fs::exists(tsv_path)) throw FormatError("missing file " + tsv_path.string());
  if (!fs::exists(meta_path)) throw FormatError("missing file " + meta_path.string());

  DatasetBundle b;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (!meta.is_array() || meta.empty()) throw FormatError("modalities.json must be a non-empty array");
  std::vector<std::string> files;
  for (const auto& entry : meta) {
    ModalityFeatures f;
    f.name = entry.at("name").get<std::string>();
    const auto dim = entry.at("dim").get<std::size_t>();
    const fs::path file = dir / entry.at("file").get<std::string>();
    if (!fs::exists(file)) throw FormatError("missing file " + file.string());
    const Shape header = read_fmat_header(file);
    if (header.cols != dim) {
      throw FormatError("dimension mismatch for modality '" + f.name + "': modalities.json says " + std::to_string(dim) +
                        ", matrix header says " + std::to_string(header.cols));
    }
    f.data = read_fmat(file);
    files.push_back(entry.at("file").get<std::string>());
    b.modalities.push_back(std::move(f));
  }
  b.n_items = b.modalities.front().data.rows();
  for (const auto& m : b.modalities) {
    if (m.data.rows() != b.n_items) {
      throw FormatError("item row count mismatch: modality '" + m.name + "' has " + std::to_string(m.data.rows()) +
                        " rows, expected " + std::to_string(b.n_items));
    }
  }

  std::istringstream lines(read_text(tsv_path));
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_user = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("user_id", 0) == 0) continue;
    std::istringstream fields(line);
    std::string u, i, s, value;
    if (!std::getline(fields, u, '\t') || !std::getline(fields, i, '\t') || !std::getline(fields, s, '\t')) {
      throw FormatError("interactions.tsv:" + std::to_string(line_no) + ": expected user_id, item_id, split");
    }
    if (std::getline(fields, value, '\t') && value != "1") {
      throw FormatError("interactions.tsv:" + std::to_string(line_no) + ": non-binary interaction value '" + value + "'");
    }
    Interaction it;
    try {
      it.user = static_cast<std::uint32_t>(std::stoul(u));
      it.item = static_cast<std::uint32_t>(std::stoul(i));
    } catch (const std::exception&) {
      throw FormatError("interactions.tsv:" + std::to_string(line_no) + ": bad id");
    }
    if (!s.empty() && s.back() == '\r') s.pop_back();
    it.split = parse_split(s);
    if (it.item >= b.n_items) {
      throw FormatError("interactions.tsv:" + std::to_string(line_no) + ": item id " + std::to_string(it.item) +
                        " exceeds the " + std::to_string(b.n_items) + " feature rows");
    }
    max_user = std::max<std::size_t>(max_user, it.user);
    b.interactions.push_back(it);
  }
  b.n_users = b.interactions.empty() ? 0 : max_user + 1;
  {
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& it : b.interactions)
      if (!seen.emplace(it.user, it.item).second)
        throw FormatError("non-binary interaction: (" + std::to_string(it.user) + ", " + std::to_string(it.item) +
                          ") listed more than once");
  }
  bool any_train = false;
  for (const auto& it : b.interactions) any_train = any_train || it.split == Split::kTrain;
  if (!any_train) throw DataError("empty training split");

  b.indicator = IndicatorMatrix(b.n_items, b.modalities.size());
  if (fs::exists(dir / "mask.json")) {
    MaskPlan plan = mask_plan_from_json(nlohmann::json::parse(read_text(dir / "mask.json")));
    if (plan.assignment.size() != b.n_items) throw FormatError("mask.json item count mismatch");
    for (std::size_t i = 0; i < b.n_items; ++i)
      for (auto m : plan.assignment[i]) {
        if (m >= b.modalities.size()) throw FormatError("mask.json modality index out of range");
        b.indicator.set(i, m, false);
      }
    b.mask = std::move(plan);
  }
  if (fs::exists(dir / "heldout")) {
    for (std::size_t m = 0; m < b.modalities.size(); ++m) {
      ModalityFeatures h;
      h.name = b.modalities[m].name;
      h.data = read_fmat(dir / "heldout" / files[m]);
      b.heldout.push_back(std::move(h));
    }
  }
  b.validate();
  return b;
}

void export_imputed(const DatasetBundle& completed, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json meta = nlohmann::json::array();
  for (std::size_t m = 0; m < completed.n_modalities(); ++m) {
    const auto& f = completed.modalities[m];
    const std::string file = file_name_for(f);
    write_fmat(dir / file, f.data);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < completed.n_items; ++i)
      if (completed.is_generated(i, m)) rows.push_back(i);
    nlohmann::json side = {{"modality", f.name}, {"file", file}, {"generated_rows", rows}};
    write_text(dir / (file + ".generated.json"), side.dump() + "\n");
    meta.push_back({{"name", f.name}, {"dim", f.dim()}, {"file", file}});
  }
  write_text(dir / "modalities.json", meta.dump(2) + "\n");
}

}  // namespace modicf
