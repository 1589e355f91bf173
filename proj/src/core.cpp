#include "cbm/core.hpp"

#include "cbm/error.hpp"

#include <algorithm>
#include <cmath>

namespace cbm {

namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) throw InputError(std::string(what) + ": non-finite entry");
}

void require_finite(const Vector& v, const char* what) {
  if (!all_finite(v)) throw InputError(std::string(what) + ": non-finite entry");
}

// Shared by logits() and mlp_forward() so a single identity layer reproduces the linear
// head bit for bit.
Vector affine(const Matrix& w, const Vector& b, const Vector& x) {
  Vector z = w * x;
  z += b;
  return z;
}

void apply(Activation a, Vector& z) {
  switch (a) {
    case Activation::identity:
      break;
    case Activation::relu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::sigmoid:
      z = z.unaryExpr([](double v) { return sigmoid(v); });
      break;
  }
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

ConceptVector::ConceptVector(Vector values, bool clamped) : values_(std::move(values)), clamped_(clamped) {
  if (values_.size() == 0) throw ShapeError("concept vector must have K > 0 entries");
  require_finite(values_, "concept vector");
}

ConceptVector ConceptVector::ground_truth(Vector values) {
  ConceptVector c(std::move(values));
  if ((c.values_.array() < 0.0).any() || (c.values_.array() > 1.0).any())
    throw InputError("ground-truth concept values must lie in [0,1]");
  return c;
}

ConceptVector ConceptVector::perturbed(const Vector& delta, bool clamp) const {
  if (delta.size() != values_.size()) throw ShapeError("perturbation length differs from K");
  Vector v = values_ + delta;
  if (clamp) v = v.cwiseMax(0.0).cwiseMin(1.0);
  return ConceptVector(std::move(v), clamp);
}

bool ConceptVector::operator==(const ConceptVector& other) const {
  return clamped_ == other.clamped_ && values_.size() == other.values_.size() && values_ == other.values_;
}

LinearHead::LinearHead(Matrix weights, Vector bias, std::vector<std::string> class_names)
    : weights_(std::move(weights)), bias_(std::move(bias)), class_names_(std::move(class_names)) {
  if (weights_.rows() < 2) throw ShapeError("linear head needs at least 2 classes");
  if (weights_.cols() < 1) throw ShapeError("linear head needs at least 1 concept");
  if (bias_.size() != weights_.rows()) throw ShapeError("bias length differs from number of classes");
  if (!class_names_.empty() && class_names_.size() != num_classes())
    throw ShapeError("class name count differs from number of classes");
  require_finite(weights_, "head weights");
  require_finite(bias_, "head bias");
}

bool LinearHead::operator==(const LinearHead& other) const {
  return weights_.rows() == other.weights_.rows() && weights_.cols() == other.weights_.cols() &&
         weights_ == other.weights_ && bias_ == other.bias_ && class_names_ == other.class_names_;
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ParameterError("unknown activation '" + std::string(s) + "'");
}

MlpHead::MlpHead(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("MLP head needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.weights.rows() < 1 || l.weights.cols() < 1) throw ShapeError("empty layer in MLP head");
    if (l.bias.size() != l.weights.rows()) throw ShapeError("layer bias length mismatch");
    if (i > 0 && l.weights.cols() != layers_[i - 1].weights.rows())
      throw ShapeError("layer " + std::to_string(i) + " input does not chain with previous output");
    require_finite(l.weights, "layer weights");
    require_finite(l.bias, "layer bias");
  }
  if (layers_.back().activation != Activation::identity)
    throw ParameterError("final MLP layer must use identity activation");
  if (layers_.back().weights.rows() < 2) throw ShapeError("MLP head needs at least 2 classes");
}

MlpHead MlpHead::from_linear(const LinearHead& head) {
  return MlpHead({DenseLayer{head.weights(), head.bias(), Activation::identity}});
}

LinearConceptPredictor::LinearConceptPredictor(Matrix weights, Vector bias, ConceptActivation activation)
    : weights_(std::move(weights)), bias_(std::move(bias)), activation_(activation) {
  if (weights_.rows() < 1 || weights_.cols() < 1) throw ShapeError("concept predictor needs K, d >= 1");
  if (bias_.size() != weights_.rows()) throw ShapeError("predictor bias length differs from K");
  require_finite(weights_, "predictor weights");
  require_finite(bias_, "predictor bias");
}

Vector LinearConceptPredictor::pre_activation(const Vector& x) const {
  if (x.size() != weights_.cols()) throw ShapeError("input length differs from predictor input dim");
  return affine(weights_, bias_, x);
}

Vector LinearConceptPredictor::forward(const Vector& x) const {
  Vector z = pre_activation(x);
  if (activation_ == ConceptActivation::sigmoid) z = z.unaryExpr([](double v) { return sigmoid(v); });
  return z;
}

bool LinearConceptPredictor::operator==(const LinearConceptPredictor& other) const {
  return activation_ == other.activation_ && weights_.rows() == other.weights_.rows() &&
         weights_.cols() == other.weights_.cols() && weights_ == other.weights_ && bias_ == other.bias_;
}

bool LabeledSample::operator==(const LabeledSample& other) const {
  if (label != other.label || !(concepts == other.concepts)) return false;
  if (features.has_value() != other.features.has_value()) return false;
  if (!features) return true;
  return features->size() == other.features->size() && *features == *other.features;
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::synthetic:
      return "synthetic";
    case Provenance::cub:
      return "cub";
    case Provenance::file:
      return "file";
  }
  return "file";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "synthetic") return Provenance::synthetic;
  if (s == "cub") return Provenance::cub;
  if (s == "file") return Provenance::file;
  throw ParameterError("unknown provenance '" + std::string(s) + "'");
}

void Dataset::validate() const {
  if (num_concepts == 0) throw ShapeError("dataset K must be positive");
  if (num_classes == 0) throw ShapeError("dataset C must be positive");
  if (!class_names.empty() && class_names.size() != num_classes)
    throw ShapeError("class name count differs from C");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto where = " (sample " + std::to_string(i) + ")";
    if (s.label >= num_classes) throw InputError("label out of range" + where);
    if (static_cast<std::size_t>(s.concepts.size()) != num_concepts)
      throw ShapeError("concept length differs from K" + where);
    if (feature_dim == 0) {
      if (s.features) throw ShapeError("features present in a concept-only dataset" + where);
    } else {
      if (!s.features) throw ShapeError("missing features" + where);
      if (static_cast<std::size_t>(s.features->size()) != feature_dim)
        throw ShapeError("feature length differs from d" + where);
      require_finite(*s.features, "features");
    }
  }
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& s : samples)
    if (s.label < num_classes) ++counts[s.label];
  return counts;
}

bool Dataset::operator==(const Dataset& other) const {
  return num_concepts == other.num_concepts && num_classes == other.num_classes &&
         feature_dim == other.feature_dim && provenance == other.provenance &&
         class_names == other.class_names && samples == other.samples;
}

Vector logits(const LinearHead& head, const Vector& c) {
  if (static_cast<std::size_t>(c.size()) != head.num_concepts())
    throw ShapeError("concept vector length " + std::to_string(c.size()) + " differs from head K " +
                     std::to_string(head.num_concepts()));
  return affine(head.weights(), head.bias(), c);
}

Vector logits(const LinearHead& head, const ConceptVector& c) { return logits(head, c.values()); }

ClassIndex argmax(const Vector& v) {
  if (v.size() == 0) throw ShapeError("argmax of empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<ClassIndex>(best);
}

ClassIndex predict(const LinearHead& head, const Vector& c) { return argmax(logits(head, c)); }
ClassIndex predict(const LinearHead& head, const ConceptVector& c) { return argmax(logits(head, c)); }

Matrix pseudoinverse(const Matrix& a, double tol) {
  if (!(tol > 0.0)) throw ParameterError("pseudoinverse tolerance must be positive");
  require_finite(a, "pseudoinverse input");
  Matrix result = Matrix::Zero(a.cols(), a.rows());
  if (a.size() == 0) return result;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return result;
  const double cutoff = tol * s[0];
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] < cutoff) break;  // sorted descending
    result.noalias() += (svd.matrixV().col(i) / s[i]) * svd.matrixU().col(i).transpose();
  }
  return result;
}

double spectral_norm(const Matrix& a) {
  require_finite(a, "spectral_norm input");
  if (a.size() == 0) return 0.0;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  return svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
}

Vector mlp_forward(const MlpHead& head, const Vector& c) {
  if (static_cast<std::size_t>(c.size()) != head.input_dim())
    throw ShapeError("concept vector length differs from MLP input dim");
  Vector z = c;
  for (const auto& layer : head.layers()) {
    z = affine(layer.weights, layer.bias, z);
    apply(layer.activation, z);
  }
  return z;
}

Vector mlp_forward(const MlpHead& head, const ConceptVector& c) { return mlp_forward(head, c.values()); }

Matrix mlp_jacobian(const MlpHead& head, const Vector& c, double step) {
  if (!(step > 0.0)) throw ParameterError("Jacobian step must be positive");
  if (static_cast<std::size_t>(c.size()) != head.input_dim())
    throw ShapeError("concept vector length differs from MLP input dim");
  Matrix jac(head.output_dim(), head.input_dim());
  Vector probe = c;
  for (Eigen::Index k = 0; k < c.size(); ++k) {
    probe[k] = c[k] + step;
    const Vector up = mlp_forward(head, probe);
    probe[k] = c[k] - step;
    const Vector down = mlp_forward(head, probe);
    probe[k] = c[k];
    jac.col(k) = (up - down) / (2.0 * step);
  }
  return jac;
}

Matrix mlp_jacobian(const MlpHead& head, const ConceptVector& c, double step) {
  return mlp_jacobian(head, c.values(), step);
}

}  // namespace cbm
