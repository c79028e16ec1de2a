#include "lidia/phantom/phantom.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lidia::phantom {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

std::array<EnhancementRow, kNumClasses> PhantomConfig::default_enhancement_table() {
  auto row = [](double nc, double a, double v, double d, double spread) {
    return EnhancementRow{Enhancement{nc, spread}, Enhancement{a, spread},
                          Enhancement{v, spread}, Enhancement{d, spread}};
  };
  return {
      row(-10, 60, -20, -25, 8),    // HCC: arterial hyperenhancement, washout
      row(-15, 10, 25, 40, 8),      // ICC: progressive delayed enhancement
      row(-25, -10, -25, -20, 8),   // meta: hypovascular
      row(-20, 40, 50, 30, 8),      // heman: fills in, stays bright
      row(-5, 55, 10, 5, 8),        // FNH: strong arterial, iso later
      row(-60, -60, -60, -60, 6),   // cyst: water density, no enhancement
      row(150, 150, 150, 150, 12),  // calc: hyperdense in all phases
      row(0, 0, 0, 0, 8),           // others: overridden by sub-profiles
  };
}

std::vector<EnhancementRow> PhantomConfig::default_others_profiles() {
  auto row = [](double nc, double a, double v, double d, double spread) {
    return EnhancementRow{Enhancement{nc, spread}, Enhancement{a, spread},
                          Enhancement{v, spread}, Enhancement{d, spread}};
  };
  return {
      row(-10, 30, 5, 0, 8),     // mildly hypervascular
      row(-15, -5, 10, 35, 8),   // delayed-enhancing
      row(-35, -35, -30, -30, 8)  // flat hypodense
  };
}

void PhantomConfig::validate() const {
  if (grid_size < 4) throw config_error("grid_size must be >= 4");
  double mix_sum = 0.0;
  for (double w : class_mix) {
    if (w < 0.0) throw config_error("class_mix entries must be nonnegative");
    mix_sum += w;
  }
  if (std::abs(mix_sum - 1.0) > 1e-9)
    throw config_error("class_mix must sum to 1 within 1e-9 (got " + std::to_string(mix_sum) +
                       ")");
  if (num_lesions_range[0] < 1 || num_lesions_range[0] > num_lesions_range[1])
    throw config_error("num_lesions_range must satisfy 1 <= min <= max");
  if (lesion_radius_range[0] < 1 || lesion_radius_range[0] > lesion_radius_range[1])
    throw config_error("lesion_radius_range must satisfy 1 <= min <= max");
  if (delayed_phase_prob < 0.0 || delayed_phase_prob > 1.0)
    throw config_error("delayed_phase_prob must lie in [0,1]");
  if (noise_sigma < 0.0) throw config_error("noise_sigma must be nonnegative");
  if (class_mix[kOthersClass] > 0.0 && others_profiles.size() < 3)
    throw config_error("others_profiles needs >= 3 sub-profiles when the others class is used");
}

// ---------------------------------------------------------------------------
// case generation
// ---------------------------------------------------------------------------

namespace {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Ellipsoid {
  double cx, cy, cz;
  double rx, ry, rz;

  // squared normalized radius of voxel (z, y, x)
  double rho2(int z, int y, int x) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
    return dx * dx + dy * dy + dz * dz;
  }
};

}  // namespace

Case generate_case(const PhantomConfig& config, uint64_t case_seed) {
  config.validate();
  Rng rng(mix64(config.seed) ^ mix64(case_seed * 0x2545f4914f6cdd1dULL + 1));

  const int g = config.grid_size;
  const int64_t vox = static_cast<int64_t>(g) * g * g;

  Case c;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%06llu", static_cast<unsigned long long>(case_seed));
  c.case_id = buf;

  const bool has_d = rng.uniform01() < config.delayed_phase_prob;
  c.phases_present = {Phase::NC, Phase::A, Phase::V};
  if (has_d) c.phases_present.push_back(Phase::D);

  // liver: large ellipsoid at the grid center with mild per-case jitter
  const double half = (g - 1) / 2.0;
  Ellipsoid liver{half,
                  half,
                  half,
                  g * 0.42 * (0.95 + 0.10 * rng.uniform01()),
                  g * 0.38 * (0.95 + 0.10 * rng.uniform01()),
                  g * 0.34 * (0.95 + 0.10 * rng.uniform01())};
  c.liver_mask = Tensor<uint8_t>({g, g, g});
  for (int z = 0; z < g; ++z)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x)
        c.liver_mask[(static_cast<int64_t>(z) * g + y) * g + x] =
            liver.rho2(z, y, x) <= 1.0 ? 1 : 0;

  // lesions: axis-aligned ellipsoids fully inside the liver, pairwise disjoint
  const int k = rng.uniform_range(config.num_lesions_range[0], config.num_lesions_range[1]);
  Tensor<uint8_t> occupied({g, g, g});
  std::vector<Ellipsoid> lesions;
  std::vector<std::array<double, kNumPhases>> offsets;

  for (int j = 0; j < k; ++j) {
    const int cls = rng.pick_weighted(
        std::vector<double>(config.class_mix.begin(), config.class_mix.end()));
    const EnhancementRow& row =
        (cls == kOthersClass && !config.others_profiles.empty())
            ? config.others_profiles[rng.uniform_int(config.others_profiles.size())]
            : config.enhancement_table[static_cast<size_t>(cls)];
    std::array<double, kNumPhases> off{};
    for (int p = 0; p < kNumPhases; ++p)
      off[static_cast<size_t>(p)] = rng.normal(row[static_cast<size_t>(p)].mean,
                                               row[static_cast<size_t>(p)].spread);

    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Ellipsoid e;
      e.rx = rng.uniform(config.lesion_radius_range[0], config.lesion_radius_range[1]);
      e.ry = rng.uniform(config.lesion_radius_range[0], config.lesion_radius_range[1]);
      e.rz = rng.uniform(config.lesion_radius_range[0], config.lesion_radius_range[1]);
      e.cx = rng.uniform(e.rx, g - 1 - e.rx);
      e.cy = rng.uniform(e.ry, g - 1 - e.ry);
      e.cz = rng.uniform(e.rz, g - 1 - e.rz);

      const int z0 = std::max(0, static_cast<int>(std::floor(e.cz - e.rz)));
      const int z1 = std::min(g - 1, static_cast<int>(std::ceil(e.cz + e.rz)));
      const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ry)));
      const int y1 = std::min(g - 1, static_cast<int>(std::ceil(e.cy + e.ry)));
      const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.rx)));
      const int x1 = std::min(g - 1, static_cast<int>(std::ceil(e.cx + e.rx)));

      bool ok = true;
      bool nonempty = false;
      for (int z = z0; z <= z1 && ok; ++z)
        for (int y = y0; y <= y1 && ok; ++y)
          for (int x = x0; x <= x1 && ok; ++x) {
            if (e.rho2(z, y, x) > 1.0) continue;
            nonempty = true;
            const int64_t i = (static_cast<int64_t>(z) * g + y) * g + x;
            if (!c.liver_mask[i] || occupied[i]) ok = false;
          }
      if (!ok || !nonempty) continue;

      Tensor<uint8_t> mask({g, g, g});
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x)
            if (e.rho2(z, y, x) <= 1.0) {
              const int64_t i = (static_cast<int64_t>(z) * g + y) * g + x;
              mask[i] = 1;
              occupied[i] = 1;
            }
      c.instance_masks.push_back(std::move(mask));
      c.labels.push_back(cls);
      lesions.push_back(e);
      offsets.push_back(off);
      placed = true;
    }
    if (!placed)
      throw Error("generation_failed",
                  "could not place lesion " + std::to_string(j) + " of case " + c.case_id +
                      "; config too crowded (radius range vs. grid size)");
  }

  // phase volumes: background + liver parenchyma + lesion enhancement + noise
  for (Phase p : c.phases_present) {
    const int pi = static_cast<int>(p);
    Tensor<float> vol({g, g, g});
    for (int64_t i = 0; i < vox; ++i)
      vol[i] = static_cast<float>(
          c.liver_mask[i]
              ? config.liver_base_intensity + config.liver_phase_offset[static_cast<size_t>(pi)]
              : config.background_intensity);
    for (size_t j = 0; j < lesions.size(); ++j) {
      const Ellipsoid& e = lesions[j];
      const double off = offsets[j][static_cast<size_t>(pi)];
      const int z0 = std::max(0, static_cast<int>(std::floor(e.cz - e.rz)));
      const int z1 = std::min(g - 1, static_cast<int>(std::ceil(e.cz + e.rz)));
      const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ry)));
      const int y1 = std::min(g - 1, static_cast<int>(std::ceil(e.cy + e.ry)));
      const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.rx)));
      const int x1 = std::min(g - 1, static_cast<int>(std::ceil(e.cx + e.rx)));
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const double r2 = e.rho2(z, y, x);
            if (r2 > 1.0) continue;
            const int64_t i = (static_cast<int64_t>(z) * g + y) * g + x;
            vol[i] += static_cast<float>(off * (1.0 - r2));  // smooth falloff to the rim
          }
    }
    if (config.noise_sigma > 0.0)
      for (int64_t i = 0; i < vox; ++i)
        vol[i] += static_cast<float>(rng.normal(0.0, config.noise_sigma));
    c.volumes.emplace(p, std::move(vol));
  }

  c.validate();
  return c;
}

void Case::validate() const {
  if (phases_present.size() != 3 && phases_present.size() != 4)
    throw format_error("case " + case_id + ": phases_present must have length 3 or 4");
  for (Phase required : {Phase::NC, Phase::A, Phase::V})
    if (std::find(phases_present.begin(), phases_present.end(), required) ==
        phases_present.end())
      throw format_error("case " + case_id + ": missing mandatory phase " +
                         phase_names()[static_cast<size_t>(required)]);
  if (!liver_mask.defined() || liver_mask.ndim() != 3)
    throw format_error("case " + case_id + ": liver mask must be a 3-D volume");
  if (volumes.size() != phases_present.size())
    throw format_error("case " + case_id + ": volume count does not match phases_present");
  for (Phase p : phases_present) {
    auto it = volumes.find(p);
    if (it == volumes.end())
      throw format_error("case " + case_id + ": missing volume for phase " +
                         phase_names()[static_cast<size_t>(p)]);
    if (it->second.shape() != liver_mask.shape())
      throw dimension_error("case " + case_id + ": volume/mask shape mismatch");
  }
  if (instance_masks.size() != labels.size())
    throw format_error("case " + case_id + ": instance mask / label count mismatch");
  const int64_t vox = liver_mask.numel();
  for (size_t j = 0; j < instance_masks.size(); ++j) {
    const auto& m = instance_masks[j];
    if (m.shape() != liver_mask.shape())
      throw dimension_error("case " + case_id + ": instance mask shape mismatch");
    if (labels[j] < 0 || labels[j] >= kNumClasses)
      throw format_error("case " + case_id + ": label out of range");
    for (int64_t i = 0; i < vox; ++i) {
      if (m[i] > 1) throw format_error("case " + case_id + ": non-binary instance mask");
      if (m[i] && !liver_mask[i])
        throw format_error("case " + case_id + ": instance mask leaves the liver mask");
    }
    for (size_t l = 0; l < j; ++l)
      for (int64_t i = 0; i < vox; ++i)
        if (m[i] && instance_masks[l][i])
          throw format_error("case " + case_id + ": instance masks overlap");
  }
}

bool Case::operator==(const Case& o) const {
  auto bytes_equal = [](const auto& a, const auto& b) {
    using Elem = std::remove_cvref_t<decltype(*a.data())>;
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(Elem)) == 0;
  };
  if (case_id != o.case_id || phases_present != o.phases_present || labels != o.labels)
    return false;
  if (!bytes_equal(liver_mask, o.liver_mask)) return false;
  if (volumes.size() != o.volumes.size() || instance_masks.size() != o.instance_masks.size())
    return false;
  for (const auto& [p, v] : volumes) {
    auto it = o.volumes.find(p);
    if (it == o.volumes.end() || !bytes_equal(v, it->second)) return false;
  }
  for (size_t j = 0; j < instance_masks.size(); ++j)
    if (!bytes_equal(instance_masks[j], o.instance_masks[j])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// persistence: raw little-endian blobs + meta.json with CRC32 checksums
// ---------------------------------------------------------------------------

uint32_t crc32_bytes(const void* data, size_t n) {
  return static_cast<uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

namespace {

std::vector<uint8_t> float_volume_bytes(const Tensor<float>& t) {
  std::vector<uint8_t> out(static_cast<size_t>(t.numel()) * 4);
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t u;
    std::memcpy(&u, &t[i], 4);
    out[static_cast<size_t>(i) * 4 + 0] = static_cast<uint8_t>(u & 0xff);
    out[static_cast<size_t>(i) * 4 + 1] = static_cast<uint8_t>((u >> 8) & 0xff);
    out[static_cast<size_t>(i) * 4 + 2] = static_cast<uint8_t>((u >> 16) & 0xff);
    out[static_cast<size_t>(i) * 4 + 3] = static_cast<uint8_t>((u >> 24) & 0xff);
  }
  return out;
}

Tensor<float> float_volume_from_bytes(const std::vector<uint8_t>& b, int g) {
  Tensor<float> t({g, g, g});
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t u = static_cast<uint32_t>(b[static_cast<size_t>(i) * 4 + 0]) |
                 (static_cast<uint32_t>(b[static_cast<size_t>(i) * 4 + 1]) << 8) |
                 (static_cast<uint32_t>(b[static_cast<size_t>(i) * 4 + 2]) << 16) |
                 (static_cast<uint32_t>(b[static_cast<size_t>(i) * 4 + 3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    t[i] = f;
  }
  return t;
}

void write_file(const fs::path& p, const void* data, size_t n) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open for writing: " + p.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw io_error("write failed: " + p.string());
}

std::vector<uint8_t> read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw io_error("cannot open for reading: " + p.string());
  const auto n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw io_error("read failed: " + p.string());
  return buf;
}

std::string volume_filename(Phase p) {
  return "volume_" + phase_names()[static_cast<size_t>(p)] + ".f32";
}

std::string lesion_filename(size_t j) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "lesion_%03zu.u8", j);
  return buf;
}

}  // namespace

void write_case(const Case& c, const fs::path& directory) {
  c.validate();
  fs::create_directories(directory);
  json files = json::object();

  auto emit = [&](const std::string& name, const std::vector<uint8_t>& bytes) {
    write_file(directory / name, bytes.data(), bytes.size());
    files[name] = {{"bytes", bytes.size()}, {"crc32", crc32_bytes(bytes.data(), bytes.size())}};
  };

  for (Phase p : c.phases_present) emit(volume_filename(p), float_volume_bytes(c.volumes.at(p)));
  emit("liver_mask.u8",
       std::vector<uint8_t>(c.liver_mask.data(), c.liver_mask.data() + c.liver_mask.numel()));
  for (size_t j = 0; j < c.instance_masks.size(); ++j)
    emit(lesion_filename(j), std::vector<uint8_t>(c.instance_masks[j].data(),
                                                  c.instance_masks[j].data() +
                                                      c.instance_masks[j].numel()));

  json meta;
  meta["case_id"] = c.case_id;
  meta["grid_size"] = c.grid();
  json phases = json::array();
  for (Phase p : c.phases_present) phases.push_back(phase_names()[static_cast<size_t>(p)]);
  meta["phases_present"] = phases;
  meta["num_lesions"] = c.num_lesions();
  json labels = json::array();
  for (int l : c.labels) labels.push_back(class_names()[static_cast<size_t>(l)]);
  meta["labels"] = labels;
  meta["files"] = files;

  const std::string text = meta.dump(2) + "\n";
  write_file(directory / "meta.json", text.data(), text.size());
}

Case read_case(const fs::path& directory) {
  const fs::path meta_path = directory / "meta.json";
  if (!fs::exists(meta_path)) throw io_error("missing meta.json in " + directory.string());
  json meta;
  try {
    meta = json::parse(read_file(meta_path));
  } catch (const json::exception& e) {
    throw format_error("malformed meta.json in " + directory.string() + ": " + e.what());
  }

  Case c;
  try {
    c.case_id = meta.at("case_id").get<std::string>();
    const int g = meta.at("grid_size").get<int>();
    for (const auto& pn : meta.at("phases_present"))
      c.phases_present.push_back(phase_from_name(pn.get<std::string>()));
    for (const auto& ln : meta.at("labels")) c.labels.push_back(class_from_name(ln.get<std::string>()));
    const int k = meta.at("num_lesions").get<int>();
    if (k != static_cast<int>(c.labels.size()))
      throw format_error("meta.json num_lesions disagrees with labels");
    const json& files = meta.at("files");

    auto load = [&](const std::string& name, size_t expected_bytes) {
      const json& entry = files.at(name);
      std::vector<uint8_t> bytes = read_file(directory / name);
      if (bytes.size() != entry.at("bytes").get<size_t>() || bytes.size() != expected_bytes)
        throw corrupt_data_error(name + ": size mismatch (expected " +
                                 std::to_string(expected_bytes) + " bytes, got " +
                                 std::to_string(bytes.size()) + ")");
      if (crc32_bytes(bytes.data(), bytes.size()) != entry.at("crc32").get<uint32_t>())
        throw corrupt_data_error(name + ": checksum mismatch");
      return bytes;
    };

    const size_t vox = static_cast<size_t>(g) * g * g;
    for (Phase p : c.phases_present)
      c.volumes.emplace(p, float_volume_from_bytes(load(volume_filename(p), vox * 4), g));
    {
      auto bytes = load("liver_mask.u8", vox);
      c.liver_mask = Tensor<uint8_t>({g, g, g},
                                     std::vector<uint8_t>(bytes.begin(), bytes.end()));
    }
    for (int j = 0; j < k; ++j) {
      auto bytes = load(lesion_filename(static_cast<size_t>(j)), vox);
      c.instance_masks.emplace_back(std::vector<int>{g, g, g},
                                    std::vector<uint8_t>(bytes.begin(), bytes.end()));
    }
  } catch (const json::exception& e) {
    throw format_error("meta.json of " + directory.string() + ": " + e.what());
  }

  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

std::vector<std::string> DatasetIndex::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw Error("not_found", "no such split: " + name);
  return it->second;
}

std::vector<std::string> DatasetIndex::all_ids() const {
  std::vector<std::string> ids;
  for (const auto& [_, v] : splits) ids.insert(ids.end(), v.begin(), v.end());
  return ids;
}

DatasetIndex build_dataset(const PhantomConfig& config, int n_cases,
                           const std::array<double, 3>& split_fracs, const fs::path& out_dir) {
  config.validate();
  double frac_sum = 0.0;
  for (double f : split_fracs) {
    if (f < 0.0) throw config_error("split fractions must be nonnegative");
    frac_sum += f;
  }
  if (std::abs(frac_sum - 1.0) > 1e-9) throw config_error("split fractions must sum to 1");
  if (n_cases < 1) throw config_error("n_cases must be positive");
  if (split_fracs[0] > 0.0 && split_fracs[1] > 0.0 && split_fracs[2] > 0.0 && n_cases < 3)
    throw config_error("n_cases must be >= 3 when all three split fractions are positive");

  // floor val/test counts; remainder goes to train
  const int n_val = static_cast<int>(std::floor(n_cases * split_fracs[1]));
  const int n_test = static_cast<int>(std::floor(n_cases * split_fracs[2]));
  const int n_train = n_cases - n_val - n_test;

  fs::create_directories(out_dir);
  std::vector<std::string> ids;
  for (int i = 0; i < n_cases; ++i) {
    Case c = generate_case(config, static_cast<uint64_t>(i));
    write_case(c, out_dir / c.case_id);
    ids.push_back(c.case_id);
  }

  DatasetIndex idx;
  idx.root = out_dir;
  idx.splits["train"] = {ids.begin(), ids.begin() + n_train};
  idx.splits["val"] = {ids.begin() + n_train, ids.begin() + n_train + n_val};
  idx.splits["test"] = {ids.begin() + n_train + n_val, ids.end()};
  write_index(idx, out_dir / "index.json");
  return idx;
}

void write_index(const DatasetIndex& idx, const fs::path& path) {
  json j;
  for (const auto& [name, ids] : idx.splits) j["splits"][name] = ids;
  const std::string text = j.dump(2) + "\n";
  write_file(path, text.data(), text.size());
}

DatasetIndex read_index(const fs::path& path) {
  if (!fs::exists(path)) throw io_error("missing dataset index: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
    DatasetIndex idx;
    idx.root = path.parent_path();
    for (const auto& [name, ids] : j.at("splits").items())
      idx.splits[name] = ids.get<std::vector<std::string>>();
    return idx;
  } catch (const json::exception& e) {
    throw format_error("malformed dataset index " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// fixtures
// ---------------------------------------------------------------------------

PhantomConfig delayed_only_pair_config(uint64_t seed, double separation) {
  PhantomConfig cfg;
  cfg.seed = seed;
  cfg.delayed_phase_prob = 1.0;
  cfg.class_mix = {0.5, 0.5, 0, 0, 0, 0, 0, 0};
  auto pair_row = [](double d_mean) {
    return EnhancementRow{Enhancement{-15, 6}, Enhancement{-15, 6}, Enhancement{-15, 6},
                          Enhancement{d_mean, 6}};
  };
  cfg.enhancement_table[0] = pair_row(separation / 2.0);
  cfg.enhancement_table[1] = pair_row(-separation / 2.0);
  cfg.num_lesions_range = {1, 2};
  return cfg;
}

PhantomConfig tiny_lesion_config(uint64_t seed, int lesion_class) {
  PhantomConfig cfg;
  cfg.seed = seed;
  cfg.class_mix = {};
  cfg.class_mix[static_cast<size_t>(lesion_class)] = 1.0;
  cfg.num_lesions_range = {1, 1};
  cfg.lesion_radius_range = {1, 2};
  return cfg;
}

}  // namespace lidia::phantom
