#include "mxr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mxr {

using nlohmann::json;

Track parse_track(const std::string& s) {
  if (s == "clean") return Track::Clean;
  if (s == "real" || s == "real-world") return Track::Real;
  throw ConfigError("unknown track '" + s + "' (expected clean or real)");
}

std::string track_name(Track t) { return t == Track::Clean ? "clean" : "real"; }

OneCycleSchedule RunConfig::schedule(std::int64_t iterations_per_epoch) const {
  OneCycleSchedule s = OneCycleSchedule::for_epochs(static_cast<double>(epochs), iterations_per_epoch);
  s.lr_start = lr_start;
  s.lr_peak = lr_peak;
  s.lr_end = lr_end;
  s.mom_start = mom_start;
  s.mom_trough = mom_trough;
  return s;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (crop < 0 || (crop > 0 && crop % kSpatialMultiple != 0))
    throw ConfigError("crop must be 0 or a positive multiple of " + std::to_string(kSpatialMultiple));
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (epochs > 0) schedule(1).validate();
  if (train_root.empty()) throw ConfigError("config needs a training dataset root (\"train\")");
  if (!std::filesystem::is_directory(train_root))
    throw ConfigError("training root '" + train_root.string() + "' does not exist");
  if (val_root && !std::filesystem::is_directory(*val_root))
    throw ConfigError("validation root '" + val_root->string() + "' does not exist");
  if (loss_net_weights && !std::filesystem::is_regular_file(*loss_net_weights))
    throw ConfigError("loss network weights '" + loss_net_weights->string() + "' do not exist");
}

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

WidthMultiplier width_from(const json& j) {
  if (j.is_string()) return WidthMultiplier::parse(j.get<std::string>());
  if (j.is_number()) return WidthMultiplier::parse(std::to_string(j.get<double>()));
  throw ConfigError("width multiplier must be a string such as \"1/8\" or a number");
}

std::array<double, 3> triple(const json& j, const char* name) {
  if (j.is_number()) return {j.get<double>(), j.get<double>(), j.get<double>()};
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string("loss.") + name + " must be a number or 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    check_keys(j, "config", {"train", "val", "track", "model", "loss", "loss_net", "schedule", "epochs", "batch_size",
                             "augment", "crop", "seed", "threads", "out"});
    if (j.contains("train")) c.train_root = j["train"].get<std::string>();
    if (j.contains("val") && !j["val"].is_null()) c.val_root = j["val"].get<std::string>();
    if (j.contains("track")) c.track = parse_track(j["track"].get<std::string>());
    if (j.contains("model")) {
      const auto& m = j["model"];
      check_keys(m, "model", {"depth", "width", "self_attention", "blur"});
      if (m.contains("depth")) c.model.encoder_depth = m["depth"].get<int>();
      if (m.contains("width")) c.model.width = width_from(m["width"]);
      if (m.contains("self_attention")) c.model.self_attention = m["self_attention"].get<bool>();
      if (m.contains("blur")) c.model.blur = m["blur"].get<bool>();
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      check_keys(l, "loss", {"alpha", "beta", "gamma"});
      if (l.contains("alpha")) c.loss.alpha = triple(l["alpha"], "alpha");
      if (l.contains("beta")) c.loss.beta = triple(l["beta"], "beta");
      if (l.contains("gamma")) c.loss.gamma = l["gamma"].get<double>();
    }
    if (j.contains("loss_net")) {
      const auto& l = j["loss_net"];
      check_keys(l, "loss_net", {"weights", "width", "seed"});
      if (l.contains("weights") && !l["weights"].is_null()) c.loss_net_weights = l["weights"].get<std::string>();
      if (l.contains("width")) c.loss_net_width = width_from(l["width"]);
      if (l.contains("seed")) c.loss_net_seed = l["seed"].get<std::uint64_t>();
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      check_keys(s, "schedule", {"lr_start", "lr_peak", "lr_end", "mom_start", "mom_trough"});
      if (s.contains("lr_start")) c.lr_start = s["lr_start"].get<double>();
      if (s.contains("lr_peak")) c.lr_peak = s["lr_peak"].get<double>();
      if (s.contains("lr_end")) c.lr_end = s["lr_end"].get<double>();
      if (s.contains("mom_start")) c.mom_start = s["mom_start"].get<double>();
      if (s.contains("mom_trough")) c.mom_trough = s["mom_trough"].get<double>();
    }
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::int64_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::int64_t>();
    if (j.contains("augment")) c.augment = j["augment"].get<bool>();
    if (j.contains("crop")) c.crop = j["crop"].get<std::int64_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
    if (j.contains("out")) c.out_dir = j["out"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a value of the wrong type: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_run_config(ss.str());
  // Relative dataset paths are taken relative to the config file.
  const auto base = path.parent_path();
  auto rebase = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  rebase(c.train_root);
  if (c.val_root) rebase(*c.val_root);
  if (c.loss_net_weights) rebase(*c.loss_net_weights);
  return c;
}

std::string to_json(const RunConfig& c) {
  json j;
  j["train"] = c.train_root.string();
  j["val"] = c.val_root ? json(c.val_root->string()) : json(nullptr);
  j["track"] = track_name(c.track);
  j["model"] = {{"depth", c.model.encoder_depth},
                {"width", c.model.width.str()},
                {"self_attention", c.model.self_attention},
                {"blur", c.model.blur}};
  j["loss"] = {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"gamma", c.loss.gamma}};
  j["loss_net"] = {{"weights", c.loss_net_weights ? json(c.loss_net_weights->string()) : json(nullptr)},
                   {"width", c.loss_net_width.str()},
                   {"seed", c.loss_net_seed}};
  j["schedule"] = {{"lr_start", c.lr_start},
                   {"lr_peak", c.lr_peak},
                   {"lr_end", c.lr_end},
                   {"mom_start", c.mom_start},
                   {"mom_trough", c.mom_trough}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["augment"] = c.augment;
  j["crop"] = c.crop;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out"] = c.out_dir.string();
  return j.dump(2);
}

}  // namespace mxr
