#include "fibermap/parcellation.hpp"

#include <cmath>

#include "fibermap/tractogram_io.hpp"

namespace fibermap {

using nlohmann::json;

std::size_t Parcellation::tract_count(const std::string& tract) const {
  auto it = tracts.find(tract);
  return it == tracts.end() ? 0 : it->second.size();
}

Parcellation parcellate_with_transform(const Tractogram& subject, const Atlas& atlas,
                                       const AffineTransform& to_atlas, const ParcellationConfig& cfg) {
  subject.validate();
  if (!atlas.any_labeled()) throw ValidationError("atlas is unlabeled; run label transfer first");
  if (cfg.reject_outliers && atlas.member_distance_mean.size() != atlas.k())
    throw ValidationError("atlas carries no member-distance statistics for outlier rejection");
  Parcellation out;
  out.subject_id = subject.subject_id;
  out.transform_used = to_atlas;
  std::vector<ResampledFiber> fibers;
  fibers.reserve(subject.size());
  for (const auto& s : subject.streamlines) fibers.push_back(resample(apply_transform(s, to_atlas), atlas.points()));
  const Eigen::MatrixXd emb = embed_all(fibers, atlas.nystrom);
  out.cluster_of_fiber = assign_all(emb, atlas.clusters);

  for (const auto& name : atlas.tract_names()) out.tracts[name];
  for (std::size_t i = 0; i < out.cluster_of_fiber.size(); ++i) {
    const std::size_t c = out.cluster_of_fiber[i];
    if (cfg.reject_outliers) {
      const double d = (emb.row(static_cast<Eigen::Index>(i)) - atlas.clusters.centroids.row(static_cast<Eigen::Index>(c))).norm();
      if (d > atlas.member_distance_mean[c] + cfg.outlier_c * atlas.member_distance_sd[c]) {
        out.cluster_of_fiber[i] = kRejected;
        out.rejected.push_back(i);
        continue;
      }
    }
    const auto& label = atlas.labels[c];
    if (label.labeled())
      out.tracts[label.tract_name].push_back(i);
    else
      out.unlabeled.push_back(i);
  }
  return out;
}

Parcellation parcellate(const Tractogram& subject, const Atlas& atlas, const ParcellationConfig& cfg) {
  if (!atlas.any_labeled()) throw ValidationError("atlas is unlabeled; run label transfer first");
  AffineTransform t;
  if (cfg.register_subject) {
    const auto& sample = atlas.nystrom.sample_fibers;
    std::vector<ResampledFiber> targets;
    const std::size_t want = std::min(cfg.atlas_registration_fibers, sample.size());
    for (std::size_t i = 0; i < want; ++i) targets.push_back(sample[i * sample.size() / want]);
    RegistrationConfig rc = cfg.registration;
    rc.points = atlas.points();
    t = register_to_atlas(subject, targets, rc);
  }
  return parcellate_with_transform(subject, atlas, t, cfg);
}

IdentificationResult identify(const Parcellation& parc, std::size_t threshold) {
  if (threshold < 1) throw ValidationError("identification threshold must be >= 1");
  IdentificationResult r;
  r.subject_id = parc.subject_id;
  r.threshold = threshold;
  for (const auto& [tract, fibers] : parc.tracts) {
    r.counts[tract] = fibers.size();
    r.identified[tract] = fibers.size() >= threshold;
  }
  return r;
}

double identification_rate(std::span<const IdentificationResult> results, const std::string& tract) {
  if (results.empty()) throw ValidationError("identification rate needs a nonempty cohort");
  std::size_t hits = 0;
  for (const auto& r : results) {
    auto it = r.identified.find(tract);
    if (it != r.identified.end() && it->second) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

std::map<std::string, double> identification_rates(std::span<const IdentificationResult> results) {
  if (results.empty()) throw ValidationError("identification rate needs a nonempty cohort");
  std::map<std::string, double> out;
  for (const auto& [tract, _] : results.front().identified) out[tract] = identification_rate(results, tract);
  return out;
}

json to_json(const Parcellation& p) {
  json tracts = json::object();
  for (const auto& [name, idx] : p.tracts) tracts[name] = idx;
  json clusters = json::array();
  for (std::size_t c : p.cluster_of_fiber) clusters.push_back(c == kRejected ? json(nullptr) : json(c));
  return {{"subject_id", p.subject_id},
          {"fiber_count", p.fiber_count()},
          {"transform", to_json(p.transform_used)},
          {"cluster_of_fiber", clusters},
          {"tracts", tracts},
          {"unlabeled", p.unlabeled},
          {"rejected", p.rejected}};
}

Parcellation parcellation_from_json(const json& j) {
  Parcellation p;
  p.subject_id = j.at("subject_id").get<std::string>();
  p.transform_used = transform_from_json(j.at("transform"));
  for (const auto& c : j.at("cluster_of_fiber")) p.cluster_of_fiber.push_back(c.is_null() ? kRejected : c.get<std::size_t>());
  for (const auto& [name, idx] : j.at("tracts").items()) p.tracts[name] = idx.get<std::vector<std::size_t>>();
  p.unlabeled = j.at("unlabeled").get<std::vector<std::size_t>>();
  p.rejected = j.value("rejected", std::vector<std::size_t>{});
  return p;
}

json to_json(const ParcellationConfig& c) {
  return {{"register_subject", c.register_subject},
          {"registration", to_json(c.registration)},
          {"atlas_registration_fibers", c.atlas_registration_fibers},
          {"reject_outliers", c.reject_outliers},
          {"outlier_c", c.outlier_c}};
}

ParcellationConfig parcellation_config_from_json(const json& j) {
  ParcellationConfig c;
  c.register_subject = j.value("register_subject", c.register_subject);
  if (j.contains("registration")) c.registration = registration_config_from_json(j["registration"]);
  c.atlas_registration_fibers = j.value("atlas_registration_fibers", c.atlas_registration_fibers);
  c.reject_outliers = j.value("reject_outliers", c.reject_outliers);
  c.outlier_c = j.value("outlier_c", c.outlier_c);
  return c;
}

}  // namespace fibermap
