#pragma once

#include "ambulate/dcnn_model.hpp"

#include <filesystem>
#include <vector>

namespace ambulate {

/// alpha-beta for convolutional layers, epsilon for dense layers.
struct LrpRuleConfig {
  double alpha = 1.0;
  double beta = 0.0;
  double epsilon = 0.01;

  /// alpha - beta = 1, beta >= 0, epsilon >= 0. Throws SpecError.
  void validate() const;
};

struct RelevanceMap {
  Eigen::MatrixXd relevance;  // 4 x 128
  int explained_class = 0;
  double explained_logit = 0.0;
  /// Total relevance at every layer boundary; entry i is the input of layer
  /// i, the last entry the network output.
  std::vector<double> per_layer_sums;
  Eigen::VectorXd per_channel_totals;
};

/// Relevance at every boundary after propagating `seed` (one value per
/// logit) down from the pre-softmax layer. Entry i is the relevance of
/// layer i's input. Parameters and trace must come from the same forward
/// pass of a single sample.
std::vector<nn::Mat<double>> propagate_relevance(const nn::ModelSpec& spec,
                                                 const nn::Parameters<double>& params,
                                                 const nn::ForwardTrace<double>& trace,
                                                 const Eigen::VectorXd& seed,
                                                 const LrpRuleConfig& rules);

/// Explains the pre-softmax logit of `target_class` (-1 picks the argmax).
/// Throws NumericalError on non-finite parameters.
RelevanceMap lrp_explain(const nn::ModelSpec& spec, const nn::Parameters<double>& params,
                         const Epoch& epoch, int target_class, const LrpRuleConfig& rules = {});
RelevanceMap lrp_explain(const ModelBundle& bundle, const Epoch& epoch, int target_class,
                         const LrpRuleConfig& rules = {});

/// |sum below - sum above| / max(|sum above|, 1e-12) for every layer.
std::vector<double> conservation_report(const RelevanceMap& map);

/// CSV `channel,sample_index,time_s,signal_value,relevance`.
std::string heatmap_csv(const RelevanceMap& map, const Epoch& epoch);

/// Signal traces colored by relevance on a diverging palette (positive hot,
/// negative cold, zero black), symmetric at the 99th percentile of |R|.
std::string heatmap_svg(const RelevanceMap& map, const Epoch& epoch);

/// Writes `<stem>.csv` and, when requested, `<stem>.svg`. Throws IoError.
void export_heatmap(const RelevanceMap& map, const Epoch& epoch, const std::filesystem::path& stem,
                    bool svg = false);

}  // namespace ambulate
