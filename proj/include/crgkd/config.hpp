#pragma once

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <regex>
#include <string>

#include "crgkd/losses.hpp"

namespace crgkd {

// Number of selected eigenvectors: an absolute count or a fraction of C.
struct SelectionSize {
  bool is_fraction = true;
  double value = 0.5;

  static SelectionSize parse(const std::string& text) {
    static const std::regex integer(R"(\s*[0-9]+\s*)");
    SelectionSize s;
    if (std::regex_match(text, integer)) {
      s.is_fraction = false;
      s.value = static_cast<double>(std::stoll(text));
      if (s.value < 1) throw Error(ErrorCode::BadN, "N must be >= 1, got '" + text + "'");
      return s;
    }
    try {
      std::size_t used = 0;
      s.value = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
      throw Error(ErrorCode::BadN, "N must be a count or a fraction in (0, 1], got '" + text + "'");
    }
    if (!(s.value > 0.0 && s.value <= 1.0)) {
      throw Error(ErrorCode::BadN, "fractional N must lie in (0, 1], got '" + text + "'");
    }
    return s;
  }

  // Fractions are floored, with a minimum of 1.
  Index resolve(Index channels) const {
    const Index n = is_fraction ? std::max<Index>(1, static_cast<Index>(std::floor(value * static_cast<double>(channels))))
                                : static_cast<Index>(value);
    if (n < 1 || n > channels) {
      throw Error(ErrorCode::BadN, "N = " + std::to_string(n) + " outside [1, " + std::to_string(channels) + "]");
    }
    return n;
  }
};

struct RunConfig {
  LossWeights weights;
  SelectionSize n;
  MaskToggles masks;
  LossToggles terms;
  RelationSoftmax relation_softmax = RelationSoftmax::Global;
  EigenSelection eigen = EigenSelection::Largest;
  SpectralVariant spectral_variant = SpectralVariant::Eigenvector;
  AdjacencyMode adjacency = AdjacencyMode::Cosine;
  std::optional<std::string> adapter;
  std::uint64_t seed = 0;
  Index steps = 500;
  double lr = 0.05;
  unsigned threads = 1;
  std::optional<std::string> out;

  LossOptions loss_options(Index channels) const {
    LossOptions o;
    o.weights = weights;
    o.terms = terms;
    o.masks = masks;
    o.n = n.resolve(channels);
    o.adjacency = adjacency;
    o.relation_softmax = relation_softmax;
    o.eigen = eigen;
    o.spectral_variant = spectral_variant;
    return o;
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(RelationSoftmax, {{RelationSoftmax::Global, "global"}, {RelationSoftmax::Row, "row"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EigenSelection, {{EigenSelection::Largest, "largest"},
                                              {EigenSelection::Smallest, "smallest"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SpectralVariant, {{SpectralVariant::Eigenvector, "vector"},
                                               {SpectralVariant::Eigenvalue, "value"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AdjacencyMode, {{AdjacencyMode::Cosine, "cosine"},
                                             {AdjacencyMode::UnnormalizedGram, "gram"}})

inline void to_json(nlohmann::ordered_json& j, const LossReport& r) {
  j = nlohmann::ordered_json{{"vertex", r.vertex},
                             {"edge", r.edge},
                             {"spectral", r.spectral},
                             {"multi_level", r.multi_level},
                             {"degenerate_spectrum", r.degenerate_spectrum}};
}

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  using nlohmann::ordered_json;
  ordered_json n = c.n.is_fraction ? ordered_json{{"kind", "fraction"}, {"value", c.n.value}}
                                   : ordered_json{{"kind", "count"}, {"value", static_cast<Index>(c.n.value)}};
  return ordered_json{
      {"alpha", c.weights.alpha},
      {"beta", c.weights.beta},
      {"gamma", c.weights.gamma},
      {"n", n},
      {"masks", {{"spatial", c.masks.spatial}, {"channel", c.masks.channel}, {"relation", c.masks.relation}}},
      {"terms", {{"vertex", c.terms.vertex}, {"edge", c.terms.edge}, {"spectral", c.terms.spectral}}},
      {"relation_softmax", c.relation_softmax},
      {"eigen", c.eigen},
      {"spectral_variant", c.spectral_variant},
      {"adjacency", c.adjacency},
      {"adapter", c.adapter ? ordered_json(*c.adapter) : ordered_json(nullptr)},
      {"seed", c.seed},
      {"steps", c.steps},
      {"lr", c.lr},
      {"threads", c.threads},
      {"out", c.out ? ordered_json(*c.out) : ordered_json(nullptr)},
  };
}

inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  RunConfig c;
  c.weights = {j.at("alpha").get<double>(), j.at("beta").get<double>(), j.at("gamma").get<double>()};
  const auto& n = j.at("n");
  c.n.is_fraction = n.at("kind").get<std::string>() == "fraction";
  c.n.value = n.at("value").get<double>();
  const auto& m = j.at("masks");
  c.masks = {m.at("spatial").get<bool>(), m.at("channel").get<bool>(), m.at("relation").get<bool>()};
  const auto& t = j.at("terms");
  c.terms = {t.at("vertex").get<bool>(), t.at("edge").get<bool>(), t.at("spectral").get<bool>()};
  c.relation_softmax = j.at("relation_softmax").get<RelationSoftmax>();
  c.eigen = j.at("eigen").get<EigenSelection>();
  c.spectral_variant = j.at("spectral_variant").get<SpectralVariant>();
  c.adjacency = j.at("adjacency").get<AdjacencyMode>();
  if (!j.at("adapter").is_null()) c.adapter = j.at("adapter").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.steps = j.at("steps").get<Index>();
  c.lr = j.at("lr").get<double>();
  c.threads = j.at("threads").get<unsigned>();
  if (!j.at("out").is_null()) c.out = j.at("out").get<std::string>();
  return c;
}

}  // namespace crgkd
