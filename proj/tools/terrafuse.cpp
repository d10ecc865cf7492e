// Command-line front end: gen-data, train, predict, fuse, eval, ablate.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <fnmatch.h>

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "terrafuse/ablation.hpp"
#include "terrafuse/data.hpp"
#include "terrafuse/fusion.hpp"
#include "terrafuse/metrics.hpp"
#include "terrafuse/nets.hpp"
#include "terrafuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace terrafuse;

namespace {

std::vector<std::string> expand_glob(const std::string& pattern) {
  fs::path p(pattern);
  const std::string pat = p.filename().string();
  if (pat.find_first_of("*?[") == std::string::npos) {
    if (!fs::exists(p)) throw DataError("input not found: '" + pattern + "'");
    return {pattern};
  }
  fs::path dir = p.parent_path();
  if (dir.empty()) dir = ".";
  if (!fs::is_directory(dir)) throw DataError("directory not found: '" + dir.string() + "'");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && fnmatch(pat.c_str(), e.path().filename().string().c_str(), 0) == 0)
      out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no files match '" + pattern + "'");
  return out;
}

void parallel_over(size_t n, const std::function<void(size_t)>& work) {
  const int cap = std::min<int>(thread_cap(), int(n));
  if (cap <= 1) {
    for (size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto runner = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        work(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < cap; ++t) pool.emplace_back(runner);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::vector<size_t> parse_widths(const std::string& s) {
  std::vector<size_t> out;
  size_t start = 0;
  while (start <= s.size()) {
    const size_t at = s.find(',', start);
    const std::string tok = s.substr(start, at == std::string::npos ? at : at - start);
    try {
      out.push_back(size_t(std::stoul(tok)));
    } catch (const std::exception&) {
      throw DataError("bad width '" + tok + "' in '" + s + "'");
    }
    if (at == std::string::npos) break;
    start = at + 1;
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw DataError("write failed for '" + path + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"terrace segmentation: data synthesis, training, fusion, evaluation"};
  app.require_subcommand(1);

  // ---- gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize a terrain dataset");
  std::string gen_out;
  size_t gen_patches = 8, gen_size = 64;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--patches", gen_patches, "number of patches")->default_val(8);
  gen->add_option("--size", gen_size, "patch edge length")->default_val(64);
  gen->add_option("--seed", gen_seed, "master seed")->default_val(0);

  // ---- train
  auto* tr = app.add_subcommand("train", "train one segmentation model");
  std::string tr_data, tr_out, tr_model = "unet", tr_widths = "16,32,64,128";
  TrainConfig tcfg;
  bool tr_noaug = false, tr_quiet = false;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--model", tr_model, "architecture")->check(CLI::IsMember({"unet", "deeplab"}));
  tr->add_option("--epochs", tcfg.epochs, "training epochs")->default_val(200);
  tr->add_option("--batch", tcfg.batch_size, "batch size")->default_val(8);
  tr->add_option("--lr", tcfg.lr, "learning rate")->default_val(0.001);
  tr->add_option("--beta", tcfg.beta, "cross-entropy weight in the composite loss")
      ->default_val(0.5)
      ->check(CLI::Range(0.0, 1.0));
  tr->add_option("--seed", tcfg.seed, "seed")->default_val(0);
  tr->add_option("--widths", tr_widths, "encoder stage widths");
  tr->add_flag("--no-augment", tr_noaug, "disable training augmentation");
  tr->add_flag("--quiet", tr_quiet, "suppress per-epoch log");
  tr->add_option("--out", tr_out, "checkpoint path")->required();

  // ---- predict
  auto* pr = app.add_subcommand("predict", "run a checkpoint over patches");
  std::string pr_ckpt, pr_input, pr_out;
  pr->add_option("--ckpt", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--input", pr_input, "MCR file or glob")->required();
  pr->add_option("--out", pr_out, "output directory for PRB files")->required();

  // ---- fuse
  auto* fu = app.add_subcommand("fuse", "blend two probability maps, write the class map");
  std::string fu_a, fu_b, fu_out;
  double fu_alpha = 0.5;
  fu->add_option("--a", fu_a, "first PRB file")->required();
  fu->add_option("--b", fu_b, "second PRB file")->required();
  fu->add_option("--alpha", fu_alpha, "weight on --a")->default_val(0.5)->check(CLI::Range(0.0, 1.0));
  fu->add_option("--out", fu_out, "output MSK path")->required();

  // ---- eval
  auto* ev = app.add_subcommand("eval", "score predicted masks against ground truth");
  std::string ev_pred, ev_truth, ev_report;
  bool ev_macro = false;
  ev->add_option("--pred", ev_pred, "predicted MSK file or glob")->required();
  ev->add_option("--truth", ev_truth, "ground-truth MSK file or glob")->required();
  ev->add_option("--report", ev_report, "report output path")->required();
  ev->add_flag("--per-patch", ev_macro, "average per-patch metrics instead of pooling pixels");

  // ---- ablate
  auto* ab = app.add_subcommand("ablate", "test-time channel importance on the val split");
  std::string ab_unet, ab_deeplab, ab_data, ab_report;
  double ab_alpha = 0.5;
  bool ab_postnorm = false;
  ab->add_option("--ckpt-unet", ab_unet, "first checkpoint");
  ab->add_option("--ckpt-deeplab", ab_deeplab, "second checkpoint");
  ab->add_option("--alpha", ab_alpha, "fusion weight")->default_val(0.5)->check(CLI::Range(0.0, 1.0));
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--report", ab_report, "report output path")->required();
  ab->add_flag("--postnorm-zero", ab_postnorm, "zero after normalization (mean fill)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      generate_dataset(gen_patches, gen_size, gen_seed, gen_out);
      std::cout << "wrote " << gen_patches << " patch/mask pairs to " << gen_out << "\n";
    } else if (*tr) {
      tcfg.model = tr_model;
      tcfg.encoder.stage_widths = parse_widths(tr_widths);
      if (tr_noaug) tcfg.augment = AugmentConfig::identity();
      TrainResult res = train(tcfg, tr_data, tr_quiet ? nullptr : &std::cout);
      save_checkpoint(tr_out, res.best);
      std::cout << "best epoch " << res.best.epoch << " val_iou " << res.best.val_iou << " -> "
                << tr_out << "\n";
    } else if (*pr) {
      const ModelCheckpoint ckpt = load_checkpoint(pr_ckpt);
      SegModel<float> model = model_from_checkpoint(ckpt);
      const std::vector<std::string> files = expand_glob(pr_input);
      std::error_code ec;
      fs::create_directories(pr_out, ec);
      parallel_over(files.size(), [&](size_t i) {
        const Patch patch = read_patch(files[i]);
        const ProbMap probs = predict_probs(model, patch, ckpt.norm);
        write_prb((fs::path(pr_out) / (fs::path(files[i]).stem().string() + ".prb")).string(),
                  probs);
      });
      std::cout << "wrote " << files.size() << " probability maps to " << pr_out << "\n";
    } else if (*fu) {
      const ProbMap fused = fuse(read_prb(fu_a), read_prb(fu_b), {fu_alpha});
      write_mask(fu_out, argmax_map(fused));
      std::cout << "wrote fused class map to " << fu_out << "\n";
    } else if (*ev) {
      const auto preds = expand_glob(ev_pred);
      const auto truths = expand_glob(ev_truth);
      if (preds.size() != truths.size())
        throw DataError("pred/truth counts differ: " + std::to_string(preds.size()) + " vs " +
                        std::to_string(truths.size()));
      MetricsReport rep;
      if (ev_macro) {
        std::vector<MetricsReport> parts;
        for (size_t i = 0; i < preds.size(); ++i)
          parts.push_back(full_report(read_mask(preds[i]), read_mask(truths[i])));
        rep = average_reports(parts);
      } else {
        ConfusionMatrix pooled;
        for (size_t i = 0; i < preds.size(); ++i)
          pooled += confusion(read_mask(preds[i]), read_mask(truths[i]));
        rep = full_report(pooled);
      }
      write_text(ev_report, report_kv(rep));
      std::cout << report_table(rep);
    } else if (*ab) {
      if (ab_unet.empty() && ab_deeplab.empty())
        throw DataError("ablate needs --ckpt-unet and/or --ckpt-deeplab");
      LoadedDataset ds = load_dataset(ab_data);
      if (ds.val_patches.empty()) throw DataError("dataset '" + ab_data + "' has no val split");
      std::optional<SegModel<float>> first, second;
      NormStats norm;
      if (!ab_unet.empty()) {
        const ModelCheckpoint c = load_checkpoint(ab_unet);
        first = model_from_checkpoint(c);
        norm = c.norm;
      }
      if (!ab_deeplab.empty()) {
        const ModelCheckpoint c = load_checkpoint(ab_deeplab);
        if (first)
          second = model_from_checkpoint(c);
        else {
          first = model_from_checkpoint(c);
          norm = c.norm;
        }
      }
      AblationConfig acfg;
      acfg.alpha = ab_alpha;
      acfg.postnorm_zero = ab_postnorm;
      const AblationReport rep = run_ablation(*first, second ? &*second : nullptr, norm,
                                              ds.val_patches, ds.val_masks, acfg);
      write_text(ab_report, ablation_kv(rep));
      std::cout << ablation_table(rep);
    }
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
