#include "lidia/harness/run_config.hpp"

#include <cstdlib>
#include <fstream>

#include "json.hpp"

namespace lidia {

using nlohmann::json;

namespace {

json model_to_json(const ModelConfig& m) {
  return json{{"grid", m.grid},
              {"channels", m.channels},
              {"query_dim", m.query_dim},
              {"embed_dim", m.embed_dim},
              {"num_queries", m.num_queries},
              {"decoder_layers", m.decoder_layers},
              {"use_ifm", m.use_ifm},
              {"shared_fconv", m.shared_fconv},
              {"in_eps", m.in_eps},
              {"lrelu_slope", m.lrelu_slope},
              {"attn_mask_threshold", m.attn_mask_threshold},
              {"init_seed", m.init_seed}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.grid = j.value("grid", m.grid);
  m.channels = j.value("channels", m.channels);
  m.query_dim = j.value("query_dim", m.query_dim);
  m.embed_dim = j.value("embed_dim", m.embed_dim);
  m.num_queries = j.value("num_queries", m.num_queries);
  m.decoder_layers = j.value("decoder_layers", m.decoder_layers);
  m.use_ifm = j.value("use_ifm", m.use_ifm);
  m.shared_fconv = j.value("shared_fconv", m.shared_fconv);
  m.in_eps = j.value("in_eps", m.in_eps);
  m.lrelu_slope = j.value("lrelu_slope", m.lrelu_slope);
  m.attn_mask_threshold = j.value("attn_mask_threshold", m.attn_mask_threshold);
  m.init_seed = j.value("init_seed", m.init_seed);
  return m;
}

json loss_to_json(const LossConfig& l) {
  return json{{"lambda_seg", l.lambda_seg},
              {"lambda_focal", l.lambda_focal},
              {"lambda_acl", l.lambda_acl},
              {"temperature", l.temperature},
              {"focal_gamma", l.focal_gamma},
              {"no_object_weight", l.no_object_weight},
              {"bg_per_fg", l.bg_per_fg},
              {"w_cls", l.w_cls},
              {"w_ce", l.w_ce},
              {"w_dice", l.w_dice},
              {"symmetric_contrast", l.symmetric_contrast},
              {"rare_in_common_denominator", l.rare_in_common_denominator},
              {"bank_capacity", l.bank_capacity}};
}

LossConfig loss_from_json(const json& j) {
  LossConfig l;
  l.lambda_seg = j.value("lambda_seg", l.lambda_seg);
  l.lambda_focal = j.value("lambda_focal", l.lambda_focal);
  l.lambda_acl = j.value("lambda_acl", l.lambda_acl);
  l.temperature = j.value("temperature", l.temperature);
  l.focal_gamma = j.value("focal_gamma", l.focal_gamma);
  l.no_object_weight = j.value("no_object_weight", l.no_object_weight);
  l.bg_per_fg = j.value("bg_per_fg", l.bg_per_fg);
  l.w_cls = j.value("w_cls", l.w_cls);
  l.w_ce = j.value("w_ce", l.w_ce);
  l.w_dice = j.value("w_dice", l.w_dice);
  l.symmetric_contrast = j.value("symmetric_contrast", l.symmetric_contrast);
  l.rare_in_common_denominator = j.value("rare_in_common_denominator", l.rare_in_common_denominator);
  l.bank_capacity = j.value("bank_capacity", l.bank_capacity);
  return l;
}

json sam_to_json(const SamConfig& s) {
  return json{{"rho", s.rho},
              {"enabled", s.enabled},
              {"base", s.base == SamConfig::Base::adam ? "adam" : "sgd"},
              {"lr", s.lr},
              {"beta1", s.beta1},
              {"beta2", s.beta2},
              {"eps", s.eps}};
}

SamConfig sam_from_json(const json& j) {
  SamConfig s;
  s.rho = j.value("rho", s.rho);
  s.enabled = j.value("enabled", s.enabled);
  const std::string base = j.value("base", std::string("adam"));
  if (base == "adam")
    s.base = SamConfig::Base::adam;
  else if (base == "sgd")
    s.base = SamConfig::Base::sgd;
  else
    throw config_error("unknown optimizer base: " + base);
  s.lr = j.value("lr", s.lr);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.eps = j.value("eps", s.eps);
  return s;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw io_error("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw io_error("cannot write " + p.string());
  f << text;
}

}  // namespace

void RunConfig::validate() const {
  if (batch_size < 1) throw config_error("batch_size must be positive");
  if (steps < 1) throw config_error("steps must be positive");
  if (checkpoint_every < 1) throw config_error("checkpoint_every must be positive");
  if (diagnosis != "livermax" && diagnosis != "pixelcount")
    throw config_error("diagnosis must be 'livermax' or 'pixelcount'");
  loss.validate();
  sam.validate();
  if (!dataset.empty() && !std::filesystem::exists(dataset))
    throw config_error("dataset path does not exist: " + dataset.string());
}

std::string RunConfig::to_json() const {
  json j;
  j["dataset"] = dataset.string();
  j["model"] = model_to_json(model);
  j["loss"] = loss_to_json(loss);
  j["sam"] = sam_to_json(sam);
  j["train"] = {{"batch_size", batch_size}, {"steps", steps},
                {"checkpoint_every", checkpoint_every}, {"log_every", log_every},
                {"seed", seed}};
  j["ablation"] = {{"disable_ifm", disable_ifm},
                   {"symmetric_contrast", symmetric_contrast},
                   {"disable_sam", disable_sam},
                   {"disable_focal", disable_focal},
                   {"diagnosis", diagnosis}};
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    RunConfig c;
    c.dataset = j.value("dataset", std::string());
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
    if (j.contains("sam")) c.sam = sam_from_json(j.at("sam"));
    if (j.contains("train")) {
      const json& t = j.at("train");
      c.batch_size = t.value("batch_size", c.batch_size);
      c.steps = t.value("steps", c.steps);
      c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
      c.log_every = t.value("log_every", c.log_every);
      c.seed = t.value("seed", c.seed);
    }
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      c.disable_ifm = a.value("disable_ifm", false);
      c.symmetric_contrast = a.value("symmetric_contrast", false);
      c.disable_sam = a.value("disable_sam", false);
      c.disable_focal = a.value("disable_focal", false);
      c.diagnosis = a.value("diagnosis", std::string("livermax"));
    }
    return c;
  } catch (const json::exception& e) {
    throw format_error(std::string("malformed run config: ") + e.what());
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  return from_json(read_text(path));
}

void RunConfig::to_file(const std::filesystem::path& path) const {
  write_text(path, to_json());
}

std::string phantom_config_to_json(const phantom::PhantomConfig& cfg) {
  json j;
  j["grid_size"] = cfg.grid_size;
  j["num_lesions_range"] = cfg.num_lesions_range;
  j["class_mix"] = cfg.class_mix;
  j["delayed_phase_prob"] = cfg.delayed_phase_prob;
  j["noise_sigma"] = cfg.noise_sigma;
  j["lesion_radius_range"] = cfg.lesion_radius_range;
  j["seed"] = cfg.seed;
  j["background_intensity"] = cfg.background_intensity;
  j["liver_base_intensity"] = cfg.liver_base_intensity;
  j["liver_phase_offset"] = cfg.liver_phase_offset;
  auto row_to_json = [](const phantom::EnhancementRow& row) {
    json r = json::array();
    for (const auto& e : row) r.push_back({{"mean", e.mean}, {"spread", e.spread}});
    return r;
  };
  json table = json::object();
  for (int c = 0; c < kNumClasses; ++c)
    table[class_names()[static_cast<size_t>(c)]] =
        row_to_json(cfg.enhancement_table[static_cast<size_t>(c)]);
  j["enhancement_table"] = table;
  json others = json::array();
  for (const auto& row : cfg.others_profiles) others.push_back(row_to_json(row));
  j["others_profiles"] = others;
  return j.dump(2) + "\n";
}

phantom::PhantomConfig phantom_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    phantom::PhantomConfig cfg;
    cfg.grid_size = j.value("grid_size", cfg.grid_size);
    if (j.contains("num_lesions_range")) cfg.num_lesions_range = j.at("num_lesions_range");
    if (j.contains("class_mix")) cfg.class_mix = j.at("class_mix");
    cfg.delayed_phase_prob = j.value("delayed_phase_prob", cfg.delayed_phase_prob);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    if (j.contains("lesion_radius_range")) cfg.lesion_radius_range = j.at("lesion_radius_range");
    cfg.seed = j.value("seed", cfg.seed);
    cfg.background_intensity = j.value("background_intensity", cfg.background_intensity);
    cfg.liver_base_intensity = j.value("liver_base_intensity", cfg.liver_base_intensity);
    if (j.contains("liver_phase_offset")) cfg.liver_phase_offset = j.at("liver_phase_offset");
    auto row_from_json = [](const json& r) {
      phantom::EnhancementRow row;
      for (int p = 0; p < kNumPhases; ++p) {
        row[static_cast<size_t>(p)].mean = r.at(static_cast<size_t>(p)).at("mean").get<double>();
        row[static_cast<size_t>(p)].spread =
            r.at(static_cast<size_t>(p)).at("spread").get<double>();
      }
      return row;
    };
    if (j.contains("enhancement_table"))
      for (int c = 0; c < kNumClasses; ++c)
        cfg.enhancement_table[static_cast<size_t>(c)] =
            row_from_json(j.at("enhancement_table").at(class_names()[static_cast<size_t>(c)]));
    if (j.contains("others_profiles")) {
      cfg.others_profiles.clear();
      for (const auto& row : j.at("others_profiles"))
        cfg.others_profiles.push_back(row_from_json(row));
    }
    return cfg;
  } catch (const json::exception& e) {
    throw format_error(std::string("malformed phantom config: ") + e.what());
  }
}

std::filesystem::path resolve_run_dir(const std::filesystem::path& out) {
  if (out.is_absolute()) return out;
  if (const char* root = std::getenv("LIDIA_RUN_ROOT"))
    return std::filesystem::path(root) / out;
  return out;
}

}  // namespace lidia
