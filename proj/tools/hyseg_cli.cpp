// hyseg command-line entry point.
//
// Exit codes: 0 success, 1 failed gradient check or unexpected error,
// 2 configuration error, 3 numeric divergence, 4 I/O or file-format error.

#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hyseg/complexity.hpp"
#include "hyseg/gradcheck.hpp"
#include "hyseg/run.hpp"

namespace {

using namespace hyseg;

int cmd_gen_data(const std::string& config, const std::vector<std::string>& sets, const std::string& out,
                 std::size_t count) {
  const RunConfig cfg = load_run_config(config, sets);
  export_dataset(cfg.data, count, out);
  write_text(fs::path(out) / "effective_config.json", to_json(cfg).dump(2) + "\n");
  std::cout << "wrote " << count << " volume/label pairs to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, const std::string& out,
              const std::string& resume) {
  const RunConfig cfg = load_run_config(config, sets);
  std::cout << "training " << Model<float>(cfg.model, cfg.train.seed).parameter_count() << " parameters for "
            << cfg.train.total_steps << " steps" << std::endl;
  const auto r = train_to_directory(cfg, out, resume, &std::cout);
  std::cout << "checkpoint " << r.checkpoint.string() << " at step " << r.final_step << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& csv_path) {
  const auto loaded = load_checkpoint<float>(checkpoint);
  const auto phantoms = import_dataset(data);
  const auto table = evaluate(loaded.model, phantoms);
  std::ostringstream csv;
  csv << "class,dice\n";
  std::cout << "class      dice\n";
  for (std::size_t k = 0; k < table.per_class.size(); ++k) {
    csv << k << ',' << format_number(table.per_class[k]) << '\n';
    std::cout << std::left << std::setw(6) << k << std::right << std::setw(10) << std::fixed << std::setprecision(4)
              << table.per_class[k] << '\n';
  }
  csv << "mean_foreground," << format_number(table.mean_foreground()) << '\n';
  std::cout << "mean foreground dice " << std::fixed << std::setprecision(4) << table.mean_foreground() << " over "
            << phantoms.size() << " volumes\n";
  write_text(csv_path.empty() ? fs::path(data) / "eval.csv" : fs::path(csv_path), csv.str());
  return 0;
}

int cmd_grad_check(const std::string& module, bool inject_fault, double tolerance) {
  GradCheckOptions opt;
  opt.filter = module;
  opt.inject_fault = inject_fault;
  opt.tolerance = tolerance;
  const auto results = run_grad_suite(opt);
  if (results.empty()) throw ConfigError("no gradient checks match \"" + module + "\"");
  for (const auto& r : results) {
    std::cout << (r.passed ? "pass " : "FAIL ") << std::left << std::setw(10) << r.module << std::setw(22) << r.op
              << std::setw(36) << r.shape << std::right << std::scientific << std::setprecision(3) << r.max_rel_err
              << "\n";
  }
  const bool ok = all_passed(results);
  std::cout << (ok ? "all " : "some ") << results.size() << " checks " << (ok ? "passed" : "FAILED") << " at tol "
            << tolerance << "\n";
  return ok ? 0 : 1;
}

int cmd_count(const std::string& config, const std::vector<std::string>& sets, std::size_t extent,
              const std::string& csv_path) {
  const RunConfig cfg = load_run_config(config, sets);
  const Triple ext{extent, extent, extent};
  const auto rep = count_flops(cfg.model, ext);
  std::cout << "input extent " << extent << "^3 (batch 1)\n\n" << rep.text() << "\n";
  const double params = static_cast<double>(rep.total_params());
  const double gflops = static_cast<double>(rep.total_flops()) / 1e9;
  std::cout << std::fixed << std::setprecision(3);
  std::cout << "parameters: " << params / 1e6 << " M   reference 2.02 M   ratio " << params / kReferenceParams
            << (std::abs(params / kReferenceParams - 1.0) <= 0.2 ? "  (within 20%)" : "  (outside 20%)") << "\n";
  std::cout << "GFLOPs:     " << gflops << "   reference 15.2 (input resolution of the reference assumed 128^3)"
            << "   ratio " << gflops / kReferenceGflops << "\n";
  const auto all_attn = count_flops(all_attention_variant(cfg.model), ext);
  std::cout << "all-attention variant: " << static_cast<double>(all_attn.total_flops()) / 1e9 << " GFLOPs ("
            << static_cast<double>(all_attn.total_flops()) / static_cast<double>(rep.total_flops())
            << "x the hybrid)\n\n";
  std::vector<Triple> extents;
  for (std::size_t e : {16, 32, 64}) extents.push_back({e, e, e});
  try {
    std::cout << "scaling (Mamba stages vs. the same stages under attention):\n"
              << format_scaling(scaling_report(cfg.model, extents));
  } catch (const ConfigError& e) {
    std::cout << "scaling report skipped: " << e.what() << "\n";
  }
  if (!csv_path.empty()) write_text(csv_path, rep.csv());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hyseg: hybrid Mamba/attention 3D segmentation"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, data, module, csv, resume;
  std::vector<std::string> sets;
  std::size_t count = 4, extent = 128;
  bool inject_fault = false;
  double tolerance = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "write synthetic volume/label pairs and a manifest");
  gen->add_option("--config", config, "JSON run config");
  gen->add_option("--set", sets, "override key=value (dotted path)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "number of pairs");

  auto* train = app.add_subcommand("train", "train on synthetic phantoms");
  train->add_option("--config", config, "JSON run config");
  train->add_option("--set", sets, "override key=value (dotted path)");
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "per-class Dice of a checkpoint on a dataset directory");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data, "directory written by gen-data")->required();
  eval->add_option("--csv", csv, "CSV output (default DATA/eval.csv)");

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient suite");
  grad->add_option("--module", module, "module or op name (tensor, embedding, ssm, attention, network, training)");
  grad->add_flag("--inject-fault", inject_fault, "add an op with a deliberately wrong backward");
  grad->add_option("--tolerance", tolerance, "max relative error");

  auto* cnt = app.add_subcommand("count", "parameter and FLOP report");
  cnt->add_option("--config", config, "JSON run config");
  cnt->add_option("--set", sets, "override key=value (dotted path)");
  cnt->add_option("--input-extent", extent, "cubic input extent");
  cnt->add_option("--csv", csv, "also write module,params,flops CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config, sets, out, count);
    if (train->parsed()) return cmd_train(config, sets, out, resume);
    if (eval->parsed()) return cmd_eval(checkpoint, data, csv);
    if (grad->parsed()) return cmd_grad_check(module, inject_fault, tolerance);
    if (cnt->parsed()) return cmd_count(config, sets, extent, csv);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
