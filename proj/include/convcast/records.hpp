#ifndef CONVCAST_RECORDS_HPP
#define CONVCAST_RECORDS_HPP

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "convcast/corpus.hpp"
#include "convcast/error.hpp"
#include "convcast/parsing.hpp"
#include "convcast/text.hpp"

namespace convcast {

inline std::string dump_line(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline nlohmann::json to_json(const ForecastRecord& r) {
  nlohmann::json j{{"instance_id", r.instance_id},
                   {"model", r.model},
                   {"context", r.context},
                   {"mode", to_string(r.mode)},
                   {"split", to_string(r.split)},
                   {"k", r.k},
                   {"raw_text", r.raw_text},
                   {"prediction", r.prediction},
                   {"outcome", r.outcome},
                   {"failed", r.failed},
                   {"attempts", r.attempts}};
  j["topic"] = r.topic ? nlohmann::json(*r.topic) : nlohmann::json(nullptr);
  if (r.parsed) {
    j["parsed"] = {{"kind", r.parsed->kind == ParsedAnswer::Kind::kLikert ? "likert" : "binary"},
                   {"value", r.parsed->value}};
  } else {
    j["parsed"] = nullptr;
  }
  j["p_hat"] = r.p_hat ? nlohmann::json(*r.p_hat) : nlohmann::json(nullptr);
  if (r.p_scaled) j["p_scaled"] = *r.p_scaled;
  if (r.prediction_scaled) j["prediction_scaled"] = *r.prediction_scaled;
  return j;
}

inline ForecastRecord forecast_record_from_json(const nlohmann::json& j, std::size_t line) {
  try {
    ForecastRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.context = j.at("context").get<std::string>();
    r.mode = parse_prompt_mode(j.at("mode").get<std::string>());
    r.split = parse_split(j.value("split", std::string("all")));
    r.k = j.at("k").get<std::size_t>();
    r.raw_text = j.at("raw_text").get<std::string>();
    r.prediction = j.at("prediction").get<int>();
    r.outcome = j.at("outcome").get<int>();
    r.failed = j.value("failed", false);
    r.attempts = j.value("attempts", 1);
    if (j.contains("topic") && j["topic"].is_string()) r.topic = j["topic"].get<std::string>();
    if (j.contains("parsed") && j["parsed"].is_object()) {
      const auto& p = j["parsed"];
      const std::string kind = p.at("kind").get<std::string>();
      if (kind != "likert" && kind != "binary") throw SchemaError(line, "unknown parsed kind " + kind);
      r.parsed = ParsedAnswer{kind == "likert" ? ParsedAnswer::Kind::kLikert : ParsedAnswer::Kind::kBinary,
                              p.at("value").get<int>()};
    }
    if (j.contains("p_hat") && j["p_hat"].is_number()) r.p_hat = j["p_hat"].get<double>();
    if (j.contains("p_scaled") && j["p_scaled"].is_number()) r.p_scaled = j["p_scaled"].get<double>();
    if (j.contains("prediction_scaled") && j["prediction_scaled"].is_number_integer())
      r.prediction_scaled = j["prediction_scaled"].get<int>();
    if ((r.prediction != 0 && r.prediction != 1) || (r.outcome != 0 && r.outcome != 1))
      throw SchemaError(line, "prediction and outcome must be 0 or 1");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(line, e.what());
  } catch (const PreconditionError& e) {
    throw SchemaError(line, e.what());
  }
}

inline std::string serialize_records(std::span<const ForecastRecord> records) {
  std::string out;
  for (const auto& r : records) out += dump_line(to_json(r)) + "\n";
  return out;
}

inline void save_records(const std::filesystem::path& path, std::span<const ForecastRecord> records) {
  text::write_file_atomic(path, serialize_records(records));
}

inline std::vector<ForecastRecord> load_records(const std::filesystem::path& path) {
  std::vector<ForecastRecord> out;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(i + 1, std::string("invalid JSON: ") + e.what());
    }
    out.push_back(forecast_record_from_json(j, i + 1));
  }
  return out;
}

}  // namespace convcast

#endif  // CONVCAST_RECORDS_HPP
