// fibermap command line: synthetic cohorts, atlas construction and
// labeling, parcellation, tract measures, statistics and full pipeline runs.
//
// Exit codes: 0 success, 1 validation, 2 runtime, 3 I/O.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fibermap/kernels.hpp"
#include "fibermap/measures.hpp"
#include "fibermap/pipeline.hpp"
#include "fibermap/tractogram_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fibermap;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kIo = 3 };

int exit_code_of(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const StageError& s) {
    return s.cause() ? exit_code_of(s.cause()) : kRuntime;
  } catch (const ValidationError&) {
    return kValidation;
  } catch (const IoError&) {
    return kIo;
  } catch (const fs::filesystem_error&) {
    return kIo;
  } catch (const json::exception&) {
    return kIo;
  } catch (...) {
    return kRuntime;
  }
}

json read_config_or_empty(const std::string& path) { return path.empty() ? json::object() : read_json(path); }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

std::vector<Tractogram> load_all(const std::vector<std::string>& paths) {
  std::vector<Tractogram> out;
  for (const auto& p : paths) out.push_back(load_tractogram(p));
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// tract -> IR from a CSV written by `fibermap ir` (columns tract,...,ir).
std::map<std::string, double> read_ir_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::string line;
  std::getline(in, line);
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto first = line.find(',');
    const auto last = line.rfind(',');
    if (first == std::string::npos) throw IoError(p.string() + ": malformed IR row '" + line + "'");
    out[line.substr(0, first)] = std::stod(line.substr(last + 1));
  }
  return out;
}

void write_glm(const fs::path& out, const TractFits& fits) {
  std::string s = "tract,category,n,beta,intercept,std_error,t,df,p,p_bonferroni,ci_low,ci_high,dropped_missing\n";
  for (const auto& f : fits.fits) {
    const auto c = category_of(f.tract);
    s += f.tract + "," + (c ? to_string(*c) : "") + "," + std::to_string(f.n) + "," + num(f.beta) + "," +
         num(f.intercept) + "," + num(f.std_error) + "," + num(f.t_stat) + "," + num(f.df) + "," + num(f.p_value) +
         "," + num(f.p_bonferroni) + "," + num(f.ci_low) + "," + num(f.ci_high) + "," +
         std::to_string(f.dropped_missing) + "\n";
  }
  write_text(out, s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fibermap: white matter fiber clustering atlas and tract analysis"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  int jobs = 0;
  app.add_flag("-q,--quiet", quiet, "Only report errors");
  app.add_flag("-v,--verbose", verbose, "Per-subject log lines");
  app.add_option("-j,--jobs", jobs, "Worker threads (0: library default)")->check(CLI::NonNegativeNumber);

  // synth cohort
  auto* synth = app.add_subcommand("synth", "Synthetic data generation");
  synth->require_subcommand(1);
  auto* synth_cohort = synth->add_subcommand("cohort", "Generate a synthetic cohort with ground truth");
  std::string synth_spec, synth_out;
  std::size_t synth_subjects = 0;
  std::uint64_t synth_seed = 0;
  bool synth_seed_set = false;
  std::string synth_group;
  synth_cohort->add_option("--spec", synth_spec, "Cohort spec JSON (defaults to the desk-scale bundles)");
  synth_cohort->add_option("--subjects", synth_subjects, "Override subject count");
  synth_cohort->add_option("--seed", synth_seed, "Override seed")->each([&](const std::string&) { synth_seed_set = true; });
  synth_cohort->add_option("--group", synth_group, "neonate or adult");
  synth_cohort->add_option("-o,--out", synth_out, "Output directory")->required();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate tractograms and rewrite them as sidecar bundles");
  std::vector<std::string> ingest_inputs;
  std::string ingest_out;
  ingest->add_option("inputs", ingest_inputs, ".tck or sidecar .json files")->required()->check(CLI::ExistingFile);
  ingest->add_option("-o,--out", ingest_out, "Output directory")->required();

  // atlas build|label|inspect
  auto* atlas = app.add_subcommand("atlas", "Atlas construction and labeling");
  atlas->require_subcommand(1);
  auto* atlas_build = atlas->add_subcommand("build", "Register, embed and cluster a training cohort");
  std::vector<std::string> build_inputs;
  std::string build_config, build_out;
  double build_enlarge = 1.0;
  atlas_build->add_option("inputs", build_inputs, "Training tractograms")->required()->check(CLI::ExistingFile);
  atlas_build->add_option("-c,--config", build_config, "Atlas build config JSON")->check(CLI::ExistingFile);
  atlas_build->add_option("--enlarge-neonates", build_enlarge, "Scale neonate subjects about their centroid");
  atlas_build->add_option("-o,--out", build_out, "Output directory")->required();

  auto* atlas_label = atlas->add_subcommand("label", "Transfer labels from a labeled reference atlas");
  std::string label_atlas, label_ref, label_out, label_config;
  bool label_no_register = false;
  atlas_label->add_option("--atlas", label_atlas, "Unlabeled atlas bundle")->required()->check(CLI::ExistingDirectory);
  atlas_label->add_option("--reference", label_ref, "Labeled reference atlas bundle")->required()->check(CLI::ExistingDirectory);
  atlas_label->add_option("-c,--config", label_config, "Registration config JSON")->check(CLI::ExistingFile);
  atlas_label->add_flag("--no-register", label_no_register, "Atlases already share a space");
  atlas_label->add_option("-o,--out", label_out, "Output atlas bundle")->required();

  auto* atlas_inspect = atlas->add_subcommand("inspect", "Print an atlas summary as JSON");
  std::string inspect_atlas;
  atlas_inspect->add_option("atlas", inspect_atlas, "Atlas bundle")->required()->check(CLI::ExistingDirectory);

  // parcellate
  auto* parc = app.add_subcommand("parcellate", "Assign subject fibers to atlas clusters and tracts");
  std::vector<std::string> parc_inputs;
  std::string parc_atlas, parc_out, parc_config;
  bool parc_no_register = false, parc_export = false;
  double parc_enlarge = 1.0;
  parc->add_option("inputs", parc_inputs, "Subject tractograms")->required()->check(CLI::ExistingFile);
  parc->add_option("--atlas", parc_atlas, "Labeled atlas bundle")->required()->check(CLI::ExistingDirectory);
  parc->add_option("-c,--config", parc_config, "Parcellation config JSON")->check(CLI::ExistingFile);
  parc->add_flag("--no-register", parc_no_register, "Subjects are already in atlas space");
  parc->add_option("--enlarge", parc_enlarge, "Scale subjects about their centroid first");
  parc->add_flag("--export-tck", parc_export, "Write one .tck per tract");
  parc->add_option("-o,--out", parc_out, "Output directory")->required();

  // ir
  auto* ir = app.add_subcommand("ir", "Identification rates over a cohort of parcellations");
  std::vector<std::string> ir_inputs;
  std::size_t ir_threshold = kDefaultIdentificationThreshold;
  std::string ir_out;
  ir->add_option("parcellations", ir_inputs, "Parcellation JSON files")->required()->check(CLI::ExistingFile);
  ir->add_option("-t,--threshold", ir_threshold, "Minimum streamlines for identification")->check(CLI::PositiveNumber);
  ir->add_option("-o,--out", ir_out, "Output CSV (tract,category,ir)")->required();

  // measure
  auto* meas = app.add_subcommand("measure", "Per-tract NoS, FA and MD");
  std::vector<std::string> meas_inputs;
  std::string meas_parc_dir, meas_out, meas_agg = "point";
  meas->add_option("inputs", meas_inputs, "Subject tractograms carrying FA")->required()->check(CLI::ExistingFile);
  meas->add_option("--parcellations", meas_parc_dir, "Directory of <subject>.json parcellations")->required()->check(CLI::ExistingDirectory);
  meas->add_option("--aggregation", meas_agg, "point or fiber")->check(CLI::IsMember({"point", "fiber"}));
  meas->add_option("-o,--out", meas_out, "Output CSV")->required();

  // stats glm|ir-test|compare
  auto* stats = app.add_subcommand("stats", "Statistics on measure tables");
  stats->require_subcommand(1);
  std::string response = "fa", covariates;
  auto* glm = stats->add_subcommand("glm", "Per-tract OLS of a measure on age");
  std::string glm_table, glm_out;
  bool glm_term_only = false;
  glm->add_option("table", glm_table, "Measure CSV")->required()->check(CLI::ExistingFile);
  glm->add_option("--response", response, "fa, md or nos")->check(CLI::IsMember({"fa", "md", "nos"}));
  glm->add_option("--covariates", covariates, "Comma-separated covariate names");
  glm->add_flag("--term-only", glm_term_only, "Drop subjects born before 32 weeks");
  glm->add_option("-o,--out", glm_out, "Output CSV (a .json summary is written alongside)")->required();

  auto* irt = stats->add_subcommand("ir-test", "Paired t-test of two atlases' per-tract IRs");
  std::string irt_a, irt_b, irt_out;
  irt->add_option("a", irt_a, "IR CSV of atlas A")->required()->check(CLI::ExistingFile);
  irt->add_option("b", irt_b, "IR CSV of atlas B")->required()->check(CLI::ExistingFile);
  irt->add_option("-o,--out", irt_out, "Output JSON");

  auto* cmp = stats->add_subcommand("compare", "Side-by-side per-tract slopes of two groups");
  std::string cmp_a, cmp_b, cmp_out, cmp_names = "a,b";
  cmp->add_option("a", cmp_a, "Measure CSV of group A")->required()->check(CLI::ExistingFile);
  cmp->add_option("b", cmp_b, "Measure CSV of group B")->required()->check(CLI::ExistingFile);
  cmp->add_option("--response", response, "fa, md or nos")->check(CLI::IsMember({"fa", "md", "nos"}));
  cmp->add_option("--covariates", covariates, "Comma-separated covariate names");
  cmp->add_option("--names", cmp_names, "Group names, comma-separated");
  cmp->add_option("-o,--out", cmp_out, "Output CSV (categories and .json written alongside)")->required();

  // run
  auto* run = app.add_subcommand("run", "Full pipeline from a config file");
  std::string run_config, run_out, write_default;
  bool no_resume = false, plot_data = false, validate_only = false;
  run->add_option("-c,--config", run_config, "Pipeline config JSON");
  run->add_option("-o,--out", run_out, "Override the output directory");
  run->add_option("--write-default-config", write_default, "Write the desk-scale default config and exit");
  run->add_flag("--no-resume", no_resume, "Recompute every stage");
  run->add_flag("--plot-data", plot_data, "Export per-figure CSVs");
  run->add_flag("--validate-only", validate_only, "Check the config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  spdlog::set_pattern("%Y-%m-%dT%H:%M:%S.%e %l %v");
  spdlog::set_level(quiet ? spdlog::level::err : spdlog::level::info);
  if (jobs > 0) kernels::omp::set_threads(jobs);

  try {
    if (synth_cohort->parsed()) {
      CohortSpec spec;
      if (!synth_spec.empty()) {
        spec = cohort_spec_from_json(read_json(synth_spec));
      } else {
        spec = *default_pipeline_config().neonate.synth;
      }
      if (synth_subjects) spec.subjects = synth_subjects;
      if (synth_seed_set) spec.seed = synth_seed;
      if (!synth_group.empty()) spec.group = parse_group(synth_group);
      const auto cohort = generate_cohort(spec);
      fs::create_directories(synth_out);
      const auto paths = write_cohort(cohort, synth_out);
      write_json(fs::path(synth_out) / "cohort_spec.json", to_json(spec));
      if (!quiet) spdlog::info("stage=synth subjects={} out={}", paths.size(), synth_out);
      return kOk;
    }

    if (ingest->parsed()) {
      fs::create_directories(ingest_out);
      std::size_t rejected = 0;
      for (const auto& p : ingest_inputs) {
        IngestReport rep;
        const Tractogram t = load_tractogram(p, &rep);
        save_tractogram(t, fs::path(ingest_out) / t.subject_id);
        rejected += rep.rejected;
        if (!quiet)
          spdlog::info("stage=ingest subject={} accepted={} rejected={}", t.subject_id, rep.accepted, rep.rejected);
      }
      return kOk;
    }

    if (atlas_build->parsed()) {
      const AtlasBuildConfig cfg = atlas_config_from_json(read_config_or_empty(build_config));
      std::vector<Tractogram> train = load_all(build_inputs);
      for (auto& t : train)
        if (t.meta.group == Group::neonate && build_enlarge != 1.0)
          t = apply_transform(t, centroid_scaling(t, build_enlarge));
      const AtlasBuildResult res = build_atlas(train, cfg);
      const fs::path out(build_out);
      save_atlas(res.atlas, out);
      for (std::size_t s = 0; s < train.size(); ++s)
        write_json(out / "transforms" / (train[s].subject_id + ".json"), to_json(res.transforms[s]));
      std::string trace = "scale,sigma,objective\n";
      for (const auto& o : res.registration.objective_trace)
        trace += std::to_string(o.scale) + "," + num(o.sigma) + "," + num(o.value) + "\n";
      write_text(out / "objective_trace.csv", trace);
      if (!quiet) spdlog::info("stage=atlas K={} pooled={}", res.atlas.k(), res.pooled.size());
      return kOk;
    }

    if (atlas_label->parsed()) {
      Atlas fresh = load_atlas(label_atlas);
      const Atlas ref = load_atlas(label_ref);
      const json cj = read_config_or_empty(label_config);
      RegistrationConfig rc = cj.contains("registration") ? registration_config_from_json(cj["registration"])
                                                          : default_pipeline_config().label_registration;
      FiberDistanceParams metric;
      metric.sigma = cj.value("sigma", metric.sigma);
      Atlas moved = fresh;
      if (!label_no_register) {
        Tractogram reps{"atlas-representatives", {}, {}};
        for (const auto& set : fresh.representative_fibers)
          for (const auto& f : set) reps.streamlines.emplace_back(f.points);
        std::vector<ResampledFiber> targets;
        for (const auto& set : ref.representative_fibers) targets.insert(targets.end(), set.begin(), set.end());
        rc.points = fresh.points();
        const AffineTransform t = register_to_atlas(reps, targets, rc);
        for (auto& set : moved.representative_fibers)
          for (auto& f : set) f = apply_transform(f, t);
      }
      fresh.labels = transfer_labels(moved, ref, metric).labels;
      save_atlas(fresh, label_out);
      if (!quiet) spdlog::info("stage=label tracts={}", fresh.tract_names().size());
      return kOk;
    }

    if (atlas_inspect->parsed()) {
      const Atlas a = load_atlas(inspect_atlas);
      json labels = json::object();
      std::size_t unlabeled = 0;
      for (const auto& l : a.labels) {
        if (l.labeled())
          labels[l.tract_name] = labels.value(l.tract_name, 0) + 1;
        else
          ++unlabeled;
      }
      const json j = {{"clusters", a.k()},
                      {"embedding_dims", a.nystrom.dims()},
                      {"nystrom_sample", a.nystrom.sample_fibers.size()},
                      {"points_per_fiber", a.points()},
                      {"kernel_sigma", a.nystrom.kernel.sigma},
                      {"tracts", a.tract_names().size()},
                      {"clusters_per_tract", labels},
                      {"unlabeled_clusters", unlabeled},
                      {"provenance", a.provenance}};
      std::cout << j.dump(2) << "\n";
      return kOk;
    }

    if (parc->parsed()) {
      const Atlas a = load_atlas(parc_atlas);
      const json cj = read_config_or_empty(parc_config);
      ParcellationConfig pc = cj.empty() ? default_pipeline_config().parcellation : parcellation_config_from_json(cj);
      if (parc_no_register) pc.register_subject = false;
      const fs::path out(parc_out);
      fs::create_directories(out);
      for (const auto& p : parc_inputs) {
        Tractogram t = load_tractogram(p);
        const Tractogram moved = parc_enlarge != 1.0 ? apply_transform(t, centroid_scaling(t, parc_enlarge)) : t;
        const Parcellation r = parcellate(moved, a, pc);
        write_json(out / (t.subject_id + ".json"), to_json(r));
        if (parc_export) {
          const Tractogram in_atlas = apply_transform(moved, r.transform_used);
          for (const auto& [tract, idx] : r.tracts) {
            if (idx.empty()) continue;
            std::vector<std::vector<Vec3>> fibers;
            for (std::size_t i : idx) fibers.push_back(in_atlas.streamlines[i].points());
            write_tck(out / t.subject_id / (tract + ".tck"), fibers, {{"tract", tract}});
          }
        }
        if (!quiet) spdlog::info("stage=parcellate subject={} fibers={} unlabeled={}", t.subject_id, r.fiber_count(), r.unlabeled.size());
      }
      return kOk;
    }

    if (ir->parsed()) {
      std::vector<IdentificationResult> results;
      for (const auto& p : ir_inputs) results.push_back(identify(parcellation_from_json(read_json(p)), ir_threshold));
      std::string s = "tract,category,ir\n";
      for (const auto& [tract, rate] : identification_rates(results)) {
        const auto c = category_of(tract);
        s += tract + "," + (c ? to_string(*c) : "") + "," + num(rate) + "\n";
      }
      write_text(ir_out, s);
      return kOk;
    }

    if (meas->parsed()) {
      TractMeasureTable table;
      const Aggregation agg = meas_agg == "fiber" ? Aggregation::fiber_mean : Aggregation::point_weighted;
      for (const auto& p : meas_inputs) {
        const Tractogram t = load_tractogram(p);
        const Parcellation pr = parcellation_from_json(read_json(fs::path(meas_parc_dir) / (t.subject_id + ".json")));
        const auto rows = extract_measures(pr, t, agg);
        table.insert(table.end(), rows.begin(), rows.end());
      }
      write_measures_csv(meas_out, table);
      return kOk;
    }

    if (glm->parsed()) {
      TractMeasureTable table = read_measures_csv(glm_table);
      if (glm_term_only)
        std::erase_if(table, [](const auto& r) { return r.meta.birth_age && *r.meta.birth_age < 32.0; });
      const auto covs = split_list(covariates);
      const TractFits fits = glm_all_tracts(table, parse_response(response), covs);
      write_glm(glm_out, fits);
      fs::path js(glm_out);
      js.replace_extension(".json");
      std::size_t sig = 0;
      for (const auto& f : fits.fits) sig += f.p_bonferroni < 0.05;
      write_json(js, {{"response", response}, {"covariates", covs}, {"tracts", fits.fits.size()},
                      {"significant_bonferroni", sig}, {"skipped", fits.skipped}});
      return kOk;
    }

    if (irt->parsed()) {
      const auto a = read_ir_csv(irt_a);
      const auto b = read_ir_csv(irt_b);
      std::vector<double> x, y;
      for (const auto& [tract, v] : a)
        if (b.count(tract)) {
          x.push_back(v);
          y.push_back(b.at(tract));
        }
      const PairedTTest t = paired_ttest(x, y);
      const json j = {{"tracts", x.size()}, {"t", t.t}, {"df", t.df}, {"p", t.p}, {"mean_difference", t.mean_difference}};
      if (!irt_out.empty()) write_json(irt_out, j);
      std::cout << j.dump(2) << "\n";
      return kOk;
    }

    if (cmp->parsed()) {
      const auto names = split_list(cmp_names);
      if (names.size() != 2) throw ValidationError("--names needs exactly two comma-separated names");
      const auto covs = split_list(covariates);
      const GroupComparison g =
          compare_groups(read_measures_csv(cmp_a), read_measures_csv(cmp_b), parse_response(response), covs);
      std::string s = "tract,category,beta_" + names[0] + ",p_" + names[0] + ",beta_" + names[1] + ",p_" + names[1] + "\n";
      std::size_t a_higher = 0;
      for (const auto& r : g.rows) {
        const auto c = category_of(r.tract);
        s += r.tract + "," + (c ? to_string(*c) : "") + "," + num(r.a.beta) + "," + num(r.a.p_value) + "," +
             num(r.b.beta) + "," + num(r.b.p_value) + "\n";
        a_higher += r.a.beta > r.b.beta;
      }
      write_text(cmp_out, s);
      std::string cs = "category,mean_beta_" + names[0] + ",mean_beta_" + names[1] + ",tracts\n";
      for (const auto& [cat, m] : g.categories)
        cs += std::string(to_string(cat)) + "," + num(m.mean_beta_a) + "," + num(m.mean_beta_b) + "," + std::to_string(m.tracts) + "\n";
      fs::path cp(cmp_out);
      write_text(cp.parent_path() / (cp.stem().string() + "_categories.csv"), cs);
      cp.replace_extension(".json");
      write_json(cp, {{"tracts", g.rows.size()}, {names[0] + "_higher", a_higher},
                      {names[1] + "_higher", g.rows.size() - a_higher}, {"excluded", g.excluded}});
      return kOk;
    }

    if (run->parsed()) {
      if (!write_default.empty()) {
        json j = to_json(default_pipeline_config());
        write_json(write_default, j);
        return kOk;
      }
      PipelineConfig cfg = run_config.empty() ? default_pipeline_config() : load_pipeline_config(run_config);
      if (!run_out.empty()) cfg.output_dir = run_out;
      if (plot_data) cfg.plot_data = true;
      if (jobs > 0) cfg.jobs = static_cast<std::size_t>(jobs);
      const auto errors = validate_config(cfg);
      if (!errors.empty()) {
        for (const auto& e : errors) std::cerr << "config error: " << e << "\n";
        return kValidation;
      }
      if (validate_only) {
        if (!quiet) std::cout << "config ok\n";
        return kOk;
      }
      RunOptions opts;
      opts.resume = !no_resume;
      opts.log_level = quiet ? LogLevel::quiet : verbose ? LogLevel::verbose : LogLevel::normal;
      const RunSummary s = run_pipeline(cfg, opts);
      if (!quiet) {
        double total = 0.0;
        for (const auto& [_, v] : s.stage_seconds) total += v;
        spdlog::info("stage=run wall={:.3f}s outputs={} dir={}", total, s.checksums.size(), s.run_dir.string());
      }
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_of(std::current_exception());
  }
  return kOk;
}
