#pragma once

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "crgkd/config.hpp"
#include "crgkd/gradients.hpp"
#include "crgkd/tensor_io.hpp"

namespace crgkd::cli {

using nlohmann::ordered_json;

enum ExitCode : int {
  kSuccess = 0,
  kCertificationFailure = 1,
  kInputError = 2,
  kDivergence = 3,
};

// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
// written to per-index slots; the first failure by index is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < count; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Invocation {
  std::string command;
  std::vector<std::string> inputs;
  RunConfig config;
  std::optional<LossTerm> corrupt;  // test hook for `check`
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline FeatureMapBatch load_student(const Invocation& inv, const std::string& path) {
  auto batch = load_feature_maps(path);
  if (!inv.config.adapter) return batch;
  const ChannelAdapter adapter(load_matrix(*inv.config.adapter));
  std::vector<FeatureMap> mapped;
  mapped.reserve(batch.size());
  for (const auto& m : batch) mapped.push_back(apply_adapter(m, adapter));
  return FeatureMapBatch(std::move(mapped));
}

inline void require_pairable(const FeatureMapBatch& teacher, const FeatureMapBatch& student) {
  if (teacher.size() != student.size()) {
    throw Error(ErrorCode::ShapeMismatch, "teacher batch has " + std::to_string(teacher.size()) +
                                              " samples, student batch has " + std::to_string(student.size()));
  }
  require_same_shape(teacher.shape(), student.shape());
}

inline ordered_json matrix_rows(const Eigen::Ref<const Matrix>& m) {
  ordered_json rows = ordered_json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline ordered_json vector_json(const Eigen::Ref<const Vector>& v) {
  ordered_json a = ordered_json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline ordered_json cmd_loss(const Invocation& inv) {
  const auto teacher = load_feature_maps(inv.inputs.at(0));
  const auto student = load_student(inv, inv.inputs.at(1));
  require_pairable(teacher, student);
  const auto opt = inv.config.loss_options(teacher.shape().channels);
  std::vector<LossReport> reports(teacher.size());
  parallel_for(teacher.size(), inv.config.threads,
               [&](std::size_t b) { reports[b] = multi_level_loss(teacher[b], student[b], opt); });
  ordered_json per = ordered_json::array();
  for (const auto& r : reports) per.push_back(r);
  return {{"per_sample", per}, {"mean", mean_report(reports)}, {"config_echo", config_to_json(inv.config)}};
}

inline ordered_json cmd_spectrum(const Invocation& inv) {
  const auto maps = load_feature_maps(inv.inputs.at(0));
  const Index n = inv.config.n.resolve(maps.shape().channels);
  std::vector<SpectralEmbedding> embs(maps.size());
  parallel_for(maps.size(), inv.config.threads, [&](std::size_t b) {
    embs[b] = spectral_embedding(build_adjacency(maps[b], inv.config.adjacency).adjacency, n, inv.config.eigen);
  });
  ordered_json per = ordered_json::array();
  for (const auto& e : embs) {
    per.push_back({{"eigenvalues", vector_json(e.eigenvalues)},
                   {"embedding", matrix_rows(e.embedding)},
                   {"degeneracy_flag", e.degenerate}});
  }
  return {{"n", n}, {"per_sample", per}, {"config_echo", config_to_json(inv.config)}};
}

inline ordered_json term_json(const TermCheck& t) {
  return {{"status", to_string(t.status)},
          {"relative_error", t.status == CheckStatus::Checked ? ordered_json(t.relative_error) : ordered_json(nullptr)},
          {"tolerance", t.tolerance}};
}

inline ordered_json cmd_check(const Invocation& inv, bool& passed) {
  const auto teacher = load_feature_maps(inv.inputs.at(0));
  const auto student = load_student(inv, inv.inputs.at(1));
  require_pairable(teacher, student);
  const auto opt = inv.config.loss_options(teacher.shape().channels);
  GradientHook hook;
  if (inv.corrupt) {
    hook = [term = *inv.corrupt](LossTerm t, FeatureMap& g) {
      if (t == term) g.values()[0] += 1.0;
    };
  }
  std::vector<GradientCheckReport> reports(teacher.size());
  parallel_for(teacher.size(), inv.config.threads,
               [&](std::size_t b) { reports[b] = check_gradients(teacher[b], student[b], opt, {}, hook); });

  passed = true;
  ordered_json per = ordered_json::array();
  std::optional<double> worst[3];
  for (const auto& r : reports) {
    passed = passed && r.passed();
    per.push_back({{"vertex", term_json(r.vertex)}, {"edge", term_json(r.edge)}, {"spectral", term_json(r.spectral)}});
    const TermCheck* terms[3] = {&r.vertex, &r.edge, &r.spectral};
    for (int k = 0; k < 3; ++k) {
      if (terms[k]->status == CheckStatus::Checked) {
        worst[k] = std::max(worst[k].value_or(0.0), terms[k]->relative_error);
      }
    }
  }
  auto opt_json = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  const GradientTolerances tol;
  return {{"per_sample", per},
          {"max_relative_error", {{"vertex", opt_json(worst[0])}, {"edge", opt_json(worst[1])},
                                  {"spectral", opt_json(worst[2])}}},
          {"tolerances", {{"vertex", tol.vertex}, {"edge", tol.edge}, {"spectral", tol.spectral}}},
          {"passed", passed},
          {"config_echo", config_to_json(inv.config)}};
}

struct DescentResult {
  std::vector<FeatureMap> students;  // final iterates
  std::vector<double> trajectory;    // batch-mean L_M, steps + 1 entries
  LossReport initial;
  LossReport final;
  Index fd_fallback_steps = 0;
};

// Gradient descent on a unit-normal student of the teacher's shape; the
// objective is the batch mean of L_M.
inline DescentResult simulate_descent(const FeatureMapBatch& teacher, const RunConfig& cfg) {
  if (cfg.steps < 0) throw Error(ErrorCode::InvalidArgument, "--steps must be >= 0");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw Error(ErrorCode::InvalidArgument, "--lr must be > 0");
  const auto opt = cfg.loss_options(teacher.shape().channels);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  DescentResult out;
  for (std::size_t b = 0; b < teacher.size(); ++b) {
    auto s = FeatureMap::zeros(teacher.shape());
    for (double& v : s.values()) v = unit(rng);
    out.students.push_back(std::move(s));
  }

  const std::size_t batch = teacher.size();
  std::vector<MultiLevelGradient> grads(batch);
  for (Index step = 0;; ++step) {
    parallel_for(batch, cfg.threads,
                 [&](std::size_t b) { grads[b] = grad_multi_level(teacher[b], out.students[b], opt); });
    std::vector<LossReport> reports;
    bool fallback = false;
    for (const auto& g : grads) {
      reports.push_back(g.report);
      fallback = fallback || g.spectral_fd_fallback;
    }
    out.final = mean_report(reports);
    if (!std::isfinite(out.final.multi_level)) {
      throw DivergenceError("L_M became non-finite at step " + std::to_string(step) + "; reduce --lr");
    }
    if (step == 0) out.initial = out.final;
    out.trajectory.push_back(out.final.multi_level);
    if (step == cfg.steps) break;
    if (fallback) ++out.fd_fallback_steps;
    const double scale = cfg.lr / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      out.students[b].channel_matrix() -= scale * grads[b].total.values.channel_matrix();
    }
  }
  return out;
}

inline ordered_json cmd_distill_sim(const Invocation& inv) {
  const auto teacher = load_feature_maps(inv.inputs.at(0));
  const auto r = simulate_descent(teacher, inv.config);
  return {{"steps", inv.config.steps},
          {"lr", inv.config.lr},
          {"trajectory", r.trajectory},
          {"initial", r.initial},
          {"final", r.final},
          {"fd_fallback_steps", r.fd_fallback_steps},
          {"config_echo", config_to_json(inv.config)}};
}

inline LossToggles parse_only(const std::vector<std::string>& items) {
  LossToggles t{false, false, false};
  if (items.size() == 1 && (items[0] == "none" || items[0] == "NONE")) return t;
  for (const auto& item : items) {
    for (char ch : item) {
      switch (ch) {
        case 'V': case 'v': t.vertex = true; break;
        case 'E': case 'e': t.edge = true; break;
        case 'S': case 's': t.spectral = true; break;
        case ',': case ' ': break;
        default: throw Error(ErrorCode::InvalidArgument, std::string("--only accepts V, E, S; got '") + ch + "'");
      }
    }
  }
  if (!t.vertex && !t.edge && !t.spectral) {
    throw Error(ErrorCode::InvalidArgument, "--only selected no terms; pass 'none' to disable all");
  }
  return t;
}

class Parser {
 public:
  Parser() : app_("Channel-relational-graph feature distillation losses", "crgkd") {
    positional_.resize(2);
    app_.require_subcommand(1);
    add(app_.add_subcommand("loss", "Multi-level loss report for teacher/student NPY pairs"),
        {"teacher", "student"});
    add(app_.add_subcommand("spectrum", "Laplacian spectrum and spectral embedding of each sample"), {"input"});
    add(app_.add_subcommand("check", "Certify analytic gradients against central differences"),
        {"teacher", "student"});
    add(app_.add_subcommand("distill-sim", "Gradient descent of a random student towards a teacher"), {"teacher"});
  }

  // Throws CLI::ParseError or crgkd::Error.
  Invocation parse(std::vector<std::string> args) {
    std::reverse(args.begin(), args.end());
    app_.parse(args);
    for (auto* sub : app_.get_subcommands()) inv_.command = sub->get_name();
    inv_.inputs.clear();
    for (const auto& p : positional_) {
      if (!p.empty()) inv_.inputs.push_back(p);
    }
    auto& c = inv_.config;
    if (n_text_) c.n = SelectionSize::parse(*n_text_);
    if (!only_.empty()) c.terms = parse_only(only_);
    c.masks = {!no_spatial_, !no_channel_, !no_relation_};
    if (!out_.empty()) c.out = out_;
    if (!adapter_.empty()) c.adapter = adapter_;
    if (!corrupt_.empty()) {
      const auto t = parse_only({corrupt_});
      if (!t.vertex && !t.edge && !t.spectral) throw Error(ErrorCode::InvalidArgument, "corruption needs a term");
      inv_.corrupt = t.vertex ? LossTerm::Vertex : t.edge ? LossTerm::Edge : LossTerm::Spectral;
    }
    c.weights.validate();
    if (c.threads == 0) throw Error(ErrorCode::InvalidArgument, "--threads must be >= 1");
    return inv_;
  }

  std::string help() const { return app_.help(); }
  int exit_for(const CLI::ParseError& e, std::ostream& out, std::ostream& err) {
    return app_.exit(e, out, err);
  }

 private:
  void add(CLI::App* sub, std::vector<std::string> positionals) {
    const std::map<std::string, RelationSoftmax> softmax{{"global", RelationSoftmax::Global},
                                                         {"row", RelationSoftmax::Row}};
    const std::map<std::string, EigenSelection> eigen{{"largest", EigenSelection::Largest},
                                                      {"smallest", EigenSelection::Smallest}};
    const std::map<std::string, SpectralVariant> variant{{"vector", SpectralVariant::Eigenvector},
                                                         {"value", SpectralVariant::Eigenvalue}};
    const std::map<std::string, AdjacencyMode> adjacency{{"cosine", AdjacencyMode::Cosine},
                                                         {"gram", AdjacencyMode::UnnormalizedGram}};
    auto& c = inv_.config;
    for (std::size_t i = 0; i < positionals.size(); ++i) {
      sub->add_option(positionals[i], positional_[i], positionals[i] + " feature maps (.npy)")->required();
    }
    sub->add_option("--alpha", c.weights.alpha, "vertex loss weight")->check(CLI::NonNegativeNumber);
    sub->add_option("--beta", c.weights.beta, "edge loss weight")->check(CLI::NonNegativeNumber);
    sub->add_option("--gamma", c.weights.gamma, "spectral loss weight")->check(CLI::NonNegativeNumber);
    sub->add_option_function<std::string>(
        "--n", [this](const std::string& v) { n_text_ = v; },
        "selected eigenvectors: a count (3) or a fraction of C (0.5); default 0.5");
    sub->add_flag("--no-spatial-mask", no_spatial_, "replace the spatial mask by ones");
    sub->add_flag("--no-channel-mask", no_channel_, "replace the channel mask by ones");
    sub->add_flag("--no-relation-mask", no_relation_, "replace the relation mask by ones");
    sub->add_option("--only", only_, "enabled loss terms, any of V E S (e.g. --only VE), or none");
    sub->add_option("--relation-softmax", c.relation_softmax, "relation mask softmax axis")
        ->transform(CLI::CheckedTransformer(softmax, CLI::ignore_case));
    sub->add_option("--eigen", c.eigen, "eigenvector selection")
        ->transform(CLI::CheckedTransformer(eigen, CLI::ignore_case));
    sub->add_option("--spectral-variant", c.spectral_variant, "compare eigenvectors or eigenvalues")
        ->transform(CLI::CheckedTransformer(variant, CLI::ignore_case));
    sub->add_option("--adjacency", c.adjacency, "cosine (default) or unnormalized gram adjacency")
        ->transform(CLI::CheckedTransformer(adjacency, CLI::ignore_case));
    sub->add_option("--adapter", adapter_, "C_out x C_in 1x1 channel adapter for the student (.npy)");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--steps", c.steps, "descent steps (distill-sim)");
    sub->add_option("--lr", c.lr, "learning rate (distill-sim)");
    sub->add_option("--threads", c.threads, "worker threads; 1 is bit-reproducible");
    sub->add_option("--out", out_, "write JSON here instead of standard output");
    sub->add_option("--debug-corrupt-gradient", corrupt_)->group("");
  }

  CLI::App app_;
  Invocation inv_;
  std::vector<std::string> positional_;
  std::optional<std::string> n_text_;
  std::vector<std::string> only_;
  bool no_spatial_ = false;
  bool no_channel_ = false;
  bool no_relation_ = false;
  std::string out_;
  std::string adapter_;
  std::string corrupt_;
};

inline Invocation parse_args(const std::vector<std::string>& args) { return Parser().parse(args); }

inline void emit(const ordered_json& doc, const RunConfig& cfg, std::ostream& out) {
  const std::string text = doc.dump(2) + "\n";
  if (!cfg.out) {
    out << text;
    return;
  }
  std::ofstream f(*cfg.out, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot open '" + *cfg.out + "' for writing");
  f << text;
  if (!f) throw Error(ErrorCode::IoError, "write failed for '" + *cfg.out + "'");
}

// Entry point shared by the executable and the tests. `args` excludes argv[0].
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Parser parser;
  Invocation inv;
  try {
    inv = parser.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return parser.exit_for(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "crgkd: " << e.what() << "\n";
    return kInputError;
  } catch (const Error& e) {
    err << "crgkd: " << e.what() << "\n";
    return kInputError;
  }

  try {
    if (inv.command == "loss") {
      emit(cmd_loss(inv), inv.config, out);
    } else if (inv.command == "spectrum") {
      emit(cmd_spectrum(inv), inv.config, out);
    } else if (inv.command == "check") {
      bool passed = false;
      emit(cmd_check(inv, passed), inv.config, out);
      return passed ? kSuccess : kCertificationFailure;
    } else if (inv.command == "distill-sim") {
      emit(cmd_distill_sim(inv), inv.config, out);
    }
  } catch (const DivergenceError& e) {
    err << "crgkd: divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const Error& e) {
    err << "crgkd: " << e.what() << "\n";
    return kInputError;
  }
  return kSuccess;
}

}  // namespace crgkd::cli
