#include "flowcritic/commands.hpp"

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "flowcritic/checkpoint.hpp"
#include "flowcritic/evaluation.hpp"

namespace flowcritic {

namespace fs = std::filesystem;

namespace {

std::string checkpoint_name(std::uint64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "ckpt_%08llu.rnvp", static_cast<unsigned long long>(step));
  return buf;
}

template <typename T>
int train_impl(const TrainOptions& opts, const Splits& data, std::ostream& log) {
  const RunConfig& cfg = opts.config;
  const fs::path out = cfg.out_dir;
  FlowModel<T> gen =
      build_nvp<T>(cfg.levels, data.train.dim(), cfg.hidden_width, stream_seed(cfg.seed, 5));
  Trainer<T> trainer(cfg.train_config(), std::move(gen), data.train, &data.valid);
  std::string last_good = "(none)";
  if (opts.resume) {
    restore(trainer, load_checkpoint(*opts.resume));
    last_good = opts.resume->string();
    log << "resumed at step " << trainer.state().step << "\n";
  }
  MetricsFile metrics(out, opts.resume.has_value());
  const auto t0 = std::chrono::steady_clock::now();
  const MetricsSink sink = [&](const MetricsRow& r) {
    MetricsRow row = r;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics.write(row);
  };
  const auto on_eval = [&](const Trainer<T>& t) {
    const fs::path p = out / checkpoint_name(t.state().step);
    save_checkpoint(p, snapshot(t));
    last_good = p.string();
  };
  try {
    trainer.run(sink, on_eval);
  } catch (const TrainingAborted& e) {
    log << "training aborted after step " << e.last_good_step() << ": " << e.what()
        << "\nlast good checkpoint: " << last_good << "\n";
    return kExitNanAbort;
  }
  save_checkpoint(out / "final.rnvp", snapshot(trainer));
  log << "finished " << trainer.state().step << " generator steps in " << out.string() << "\n";
  return kExitOk;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

template <typename T>
void eval_bpd_stub(const ModelMeta& meta, const Splits& data, const fs::path& out) {
  CsvWriter csv(out / "eval_bpd.csv", "split,nll_nats,bits_per_dim");
  for (const Dataset* d : {&data.train, &data.valid}) {
    if (d->dim() != meta.dim) throw ConfigError("dataset", "dimension does not match checkpoint");
    for (double v : d->examples.data()) {
      if (!(v >= 0.0 && v < 1.0)) {
        throw ConfigError("dataset", "uniform stub has zero density outside [0, 1)");
      }
    }
    // Density 1 on the unit cube: log p(z1) = 0 for every example.
    csv.row({split_name(d->split), format_double(0.0), format_double(bits_per_dim(0.0, meta.dim))});
  }
}

template <typename T>
int eval_impl(const EvalOptions& opts, const Checkpoint& ckpt, std::ostream& log) {
  const RunConfig& cfg = opts.config;
  const ModelMeta meta = read_meta(ckpt);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  const Splits data = load_dataset(cfg.dataset);

  if (meta.kind == ModelKind::uniform_stub) {
    for (const auto& k : opts.kinds) {
      if (k != "bpd") throw ConfigError("kinds", "the uniform stub only supports bpd");
    }
    eval_bpd_stub<T>(meta, data, out);
    log << "wrote eval_bpd.csv\n";
    return kExitOk;
  }

  const FlowModel<T> model = model_from_checkpoint<T>(ckpt);
  if (data.valid.dim() != model.dim()) {
    throw ConfigError("dataset", "dimension does not match checkpoint");
  }
  const Tensor<T> valid = data.valid.examples.template cast<T>();

  for (const auto& kind : opts.kinds) {
    if (kind == "bpd") {
      CsvWriter csv(out / "eval_bpd.csv", "split,nll_nats,bits_per_dim");
      for (const Dataset* d : {&data.train, &data.valid, &data.test}) {
        const double nll = mean_of(nll_values(model, d->examples.template cast<T>()));
        csv.row({split_name(d->split), format_double(nll),
                 format_double(bits_per_dim(-nll, model.dim()))});
      }
    } else if (kind == "wdist") {
      IndependentCriticConfig icfg;
      icfg.critic = default_critic_config(data.train, 0.01);
      icfg.budget = opts.critic_budget;
      icfg.seed = stream_seed(cfg.seed, 41);
      const auto gen = model_source(model);
      const auto ic = train_independent_critic(dataset_source<T>(data.valid), gen, icfg);
      CsvWriter csv(out / "eval_wdist.csv", "source,w_hat,bootstrap_std");
      auto report = [&](const char* name, const SampleSource<T>& a, const SampleSource<T>& b,
                        std::uint64_t tag) {
        const WEstimate w = w_hat(ic, a, b, 50, 64, stream_seed(cfg.seed, tag));
        csv.row({name, format_double(w.value), format_double(w.bootstrap_std)});
      };
      report("valid", dataset_source<T>(data.valid), gen, 42);
      report("train", dataset_source<T>(data.train), gen, 43);
      report("test", dataset_source<T>(data.test), gen, 44);
      report("valid_self", dataset_source<T>(data.valid), dataset_source<T>(data.valid), 45);
    } else if (kind == "latents") {
      const LatentStats st = latent_stats(model, valid, {0, 1});
      CsvWriter csv(out / "eval_latents.csv", "dim,mean,std");
      for (std::size_t d = 0; d < st.mean.size(); ++d) {
        csv.row({std::to_string(d), format_double(st.mean[d]), format_double(st.std[d])});
      }
      CsvWriter grid(out / "eval_latents_grid.csv", "row,col,lo_first,lo_second,count");
      const double w = (st.grid.hi - st.grid.lo) / static_cast<double>(st.grid.bins);
      for (std::size_t i = 0; i < st.grid.bins; ++i) {
        for (std::size_t j = 0; j < st.grid.bins; ++j) {
          grid.row({std::to_string(i), std::to_string(j),
                    format_double(st.grid.lo + w * static_cast<double>(i)),
                    format_double(st.grid.lo + w * static_cast<double>(j)),
                    std::to_string(st.counts[i * st.grid.bins + j])});
        }
      }
    } else if (kind == "nllhist") {
      const Histogram h = nll_histogram(model, valid, 50);
      CsvWriter csv(out / "eval_nllhist.csv", "bin_lo,bin_hi,count");
      for (std::size_t i = 0; i < h.counts.size(); ++i) {
        csv.row({format_double(h.edges[i]), format_double(h.edges[i + 1]),
                 std::to_string(h.counts[i])});
      }
    } else if (kind == "jrank") {
      Rng rng(stream_seed(cfg.seed, 46));
      const auto probes = rng.normal_matrix<T>(5, model.dim());
      const auto ranks = jacobian_rank(model, probes);
      CsvWriter sv(out / "eval_jrank.csv", "probe,index,singular_value");
      CsvWriter rk(out / "eval_jrank_rank.csv", "probe,rank,fd_error");
      for (std::size_t p = 0; p < ranks.size(); ++p) {
        for (std::size_t i = 0; i < ranks[p].singular_values.size(); ++i) {
          sv.row({std::to_string(p), std::to_string(i), format_double(ranks[p].singular_values[i])});
        }
        rk.row({std::to_string(p), std::to_string(ranks[p].rank), format_double(ranks[p].fd_error)});
      }
    } else if (kind == "klgap") {
      DiscriminatorConfig dc;
      dc.seed = stream_seed(cfg.seed, 47);
      const KlGap kl = kl_gap(model, dc, opts.samples);
      CsvWriter csv(out / "eval_klgap.csv", "kl_unbiased,kl_disc");
      csv.row({format_double(kl.kl_unbiased), format_double(kl.kl_disc)});
    }
    log << "wrote eval_" << kind << ".csv\n";
  }
  return kExitOk;
}

template <typename T>
int sample_impl(const SampleOptions& opts, const Checkpoint& ckpt, std::ostream& log) {
  const ModelMeta meta = read_meta(ckpt);
  const FlowModel<T> model = model_from_checkpoint<T>(ckpt);
  Rng rng(opts.seed);
  Tensor<T> x, lp;
  if (opts.mode == SampleMode::fresh) {
    Samples<T> s = sample(model, opts.n, rng);
    x = std::move(s.x);
    lp = std::move(s.log_prob);
  } else {
    if (!opts.input) throw ConfigError("input", "partial modes need an input batch");
    const Tensor<double> rows = load_fc2d(*opts.input);
    if (rows.cols() != model.dim()) throw ConfigError("input", "width does not match checkpoint");
    const std::size_t n = std::min(opts.n, rows.rows());
    const auto half = opts.mode == SampleMode::partial_first ? LatentHalf::first : LatentHalf::second;
    x = partial_resample(model, take_rows(rows, 0, n).template cast<T>(), half, rng);
    lp = log_prob(model, x);
  }
  fs::create_directories(opts.out_dir);
  if (meta.image_side) {
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(x.rows()))));
    write_pgm_grid(opts.out_dir / "samples.pgm", x.template cast<double>(), meta.image_side, cols);
    CsvWriter csv(opts.out_dir / "samples_logprob.csv", "index,logprob");
    for (std::size_t i = 0; i < x.rows(); ++i) {
      csv.row({std::to_string(i), format_double(static_cast<double>(lp[i]))});
    }
    log << "wrote samples.pgm\n";
  } else {
    std::string header;
    if (model.dim() == 2) {
      header = "x,y,logprob";
    } else {
      for (std::size_t d = 0; d < model.dim(); ++d) header += "x" + std::to_string(d) + ",";
      header += "logprob";
    }
    CsvWriter csv(opts.out_dir / "samples.csv", header);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      std::vector<std::string> fields;
      for (std::size_t d = 0; d < model.dim(); ++d) {
        fields.push_back(format_double(static_cast<double>(x(i, d))));
      }
      fields.push_back(format_double(static_cast<double>(lp[i])));
      csv.row(fields);
    }
    log << "wrote samples.csv\n";
  }
  return kExitOk;
}

}  // namespace

SampleMode parse_sample_mode(const std::string& name) {
  if (name == "fresh") return SampleMode::fresh;
  if (name == "partial_first") return SampleMode::partial_first;
  if (name == "partial_second") return SampleMode::partial_second;
  throw ConfigError("mode", "expected fresh, partial_first or partial_second");
}

int exit_code_for_current_exception(std::ostream& log) {
  try {
    throw;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const TrainingAborted& e) {
    log << "training aborted: " << e.what() << "\n";
    return kExitNanAbort;
  } catch (const ChecksumError& e) {
    log << "checksum error: " << e.what() << "\n";
    return kExitChecksum;
  } catch (const IoError& e) {
    log << "i/o error: " << e.what() << "\n";
    return e.error_number() == ENOSPC || e.error_number() == EDQUOT ? kExitDiskFull : kExitBadConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitBadConfig;
  }
}

int cmd_train(const TrainOptions& opts, std::ostream& log) {
  try {
    const RunConfig& cfg = opts.config;
    fs::create_directories(cfg.out_dir);
    DirLock lock(cfg.out_dir);
    const Splits data = load_dataset(cfg.dataset);
    return cfg.precision == DType::f32 ? train_impl<float>(opts, data, log)
                                       : train_impl<double>(opts, data, log);
  } catch (...) {
    return exit_code_for_current_exception(log);
  }
}

int cmd_eval(const EvalOptions& opts, std::ostream& log) {
  try {
    static const std::set<std::string> known{"wdist", "bpd", "latents", "nllhist", "jrank", "klgap"};
    if (opts.kinds.empty()) throw ConfigError("kinds", "no report kinds given");
    for (const auto& k : opts.kinds) {
      if (!known.contains(k)) throw ConfigError("kinds", "unknown report kind '" + k + "'");
    }
    const Checkpoint ckpt = load_checkpoint(opts.checkpoint);
    return ckpt.dtype == DType::f32 ? eval_impl<float>(opts, ckpt, log)
                                    : eval_impl<double>(opts, ckpt, log);
  } catch (...) {
    return exit_code_for_current_exception(log);
  }
}

int cmd_sample(const SampleOptions& opts, std::ostream& log) {
  try {
    if (opts.n < 1) throw ConfigError("n", "must be positive");
    if (opts.mode != SampleMode::fresh && !opts.input) {
      throw ConfigError("input", "partial modes need an input batch");
    }
    const Checkpoint ckpt = load_checkpoint(opts.checkpoint);
    return ckpt.dtype == DType::f32 ? sample_impl<float>(opts, ckpt, log)
                                    : sample_impl<double>(opts, ckpt, log);
  } catch (...) {
    return exit_code_for_current_exception(log);
  }
}

}  // namespace flowcritic
