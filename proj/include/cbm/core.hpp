#pragma once

// Domain types and dense numerical primitives shared by every module.

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cbm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ClassIndex = std::size_t;

/// Singular values below this fraction of the largest one are treated as zero.
inline constexpr double kDefaultPinvTolerance = 1e-10;

/// Default central-difference step for Jacobians of nonlinear heads.
inline constexpr double kDefaultJacobianStep = 1e-5;

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

/// K concept activations. Ground-truth vectors live in [0,1]^K; perturbed ones may leave
/// the box, and `clamped()` records whether a projection back onto it was applied.
class ConceptVector {
 public:
  explicit ConceptVector(Vector values, bool clamped = false);

  /// Same as the constructor but additionally requires every value to lie in [0,1].
  static ConceptVector ground_truth(Vector values);

  const Vector& values() const noexcept { return values_; }
  Eigen::Index size() const noexcept { return values_.size(); }
  bool clamped() const noexcept { return clamped_; }
  double operator[](Eigen::Index k) const { return values_[k]; }
  double norm() const { return values_.norm(); }

  /// c + delta, optionally clamped to [0,1].
  ConceptVector perturbed(const Vector& delta, bool clamp) const;

  bool operator==(const ConceptVector& other) const;

 private:
  Vector values_;
  bool clamped_ = false;
};

/// Linear concept-to-class head g(c) = Wc + b. Row i of W is the weight vector of class i.
class LinearHead {
 public:
  LinearHead(Matrix weights, Vector bias, std::vector<std::string> class_names = {});

  const Matrix& weights() const noexcept { return weights_; }
  const Vector& bias() const noexcept { return bias_; }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }

  std::size_t num_classes() const noexcept { return static_cast<std::size_t>(weights_.rows()); }
  std::size_t num_concepts() const noexcept { return static_cast<std::size_t>(weights_.cols()); }

  bool operator==(const LinearHead& other) const;

 private:
  Matrix weights_;
  Vector bias_;
  std::vector<std::string> class_names_;
};

enum class Activation { identity, relu, sigmoid };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::identity;
};

/// Multi-layer concept-to-class head. The last layer must produce raw logits.
class MlpHead {
 public:
  explicit MlpHead(std::vector<DenseLayer> layers);

  static MlpHead from_linear(const LinearHead& head);

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(layers_.front().weights.cols()); }
  std::size_t output_dim() const noexcept { return static_cast<std::size_t>(layers_.back().weights.rows()); }

 private:
  std::vector<DenseLayer> layers_;
};

/// Output nonlinearity of the input-to-concept map. Training always uses sigmoid; the
/// identity variant exists for transfer experiments with an exactly linear predictor.
enum class ConceptActivation { sigmoid, identity };

/// h(x) = act(W_h x + b_h), mapping d input features to K concepts.
class LinearConceptPredictor {
 public:
  LinearConceptPredictor(Matrix weights, Vector bias,
                         ConceptActivation activation = ConceptActivation::sigmoid);

  const Matrix& weights() const noexcept { return weights_; }
  const Vector& bias() const noexcept { return bias_; }
  ConceptActivation activation() const noexcept { return activation_; }

  std::size_t num_concepts() const noexcept { return static_cast<std::size_t>(weights_.rows()); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(weights_.cols()); }

  Vector pre_activation(const Vector& x) const;
  Vector forward(const Vector& x) const;

  bool operator==(const LinearConceptPredictor& other) const;

 private:
  Matrix weights_;
  Vector bias_;
  ConceptActivation activation_;
};

struct LabeledSample {
  std::optional<Vector> features;
  ConceptVector concepts;
  ClassIndex label = 0;

  bool operator==(const LabeledSample& other) const;
};

enum class Provenance { synthetic, cub, file };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct Dataset {
  std::vector<LabeledSample> samples;
  std::size_t num_concepts = 0;  // K
  std::size_t num_classes = 0;   // C
  std::size_t feature_dim = 0;   // d, 0 for concept-only datasets
  Provenance provenance = Provenance::file;
  std::vector<std::string> class_names;

  /// Throws InputError / ShapeError when any sample disagrees with the metadata.
  void validate() const;

  std::vector<std::size_t> class_counts() const;
  bool has_features() const noexcept { return feature_dim > 0; }
  std::size_t size() const noexcept { return samples.size(); }

  bool operator==(const Dataset& other) const;
};

Vector logits(const LinearHead& head, const ConceptVector& c);
Vector logits(const LinearHead& head, const Vector& c);

/// Index of the largest entry; the lowest index wins ties.
ClassIndex argmax(const Vector& v);

ClassIndex predict(const LinearHead& head, const ConceptVector& c);
ClassIndex predict(const LinearHead& head, const Vector& c);

/// Moore-Penrose pseudoinverse via SVD. Singular values below tol * sigma_max are dropped.
Matrix pseudoinverse(const Matrix& a, double tol = kDefaultPinvTolerance);

/// Largest singular value.
double spectral_norm(const Matrix& a);

Vector mlp_forward(const MlpHead& head, const ConceptVector& c);
Vector mlp_forward(const MlpHead& head, const Vector& c);

/// C x K Jacobian of the head's logits by central differences.
Matrix mlp_jacobian(const MlpHead& head, const ConceptVector& c, double step = kDefaultJacobianStep);
Matrix mlp_jacobian(const MlpHead& head, const Vector& c, double step = kDefaultJacobianStep);

double sigmoid(double z);

}  // namespace cbm
