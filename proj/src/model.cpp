// SPDX-License-Identifier: Apache-2.0
#include "reseg/model.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "model_specs.hpp"

namespace reseg {

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_h = 8;
  c.input_w = 8;
  c.input_channels = 3;
  c.renet = {{2, 2, 4}};
  c.upsample = {{2, 2, 8}};
  c.classes = 2;
  c.seed = 1;
  return c;
}

std::array<std::size_t, 2> ModelConfig::downsampling() const {
  auto f = frontend_downsampling(frontend);
  for (const auto& r : renet) {
    f[0] *= r.patch_h;
    f[1] *= r.patch_w;
  }
  return f;
}

std::array<std::size_t, 2> ModelConfig::upsampling() const {
  std::array<std::size_t, 2> f{1, 1};
  for (const auto& u : upsample) {
    f[0] *= u.filter_h;
    f[1] *= u.filter_w;
  }
  return f;
}

void ModelConfig::validate() const {
  if (input_h == 0 || input_w == 0 || input_channels == 0) throw ConfigError("model input extents must be positive");
  if (classes < 2) throw ConfigError("model needs at least 2 classes, got " + std::to_string(classes));
  for (std::size_t l = 0; l < renet.size(); ++l) {
    const auto& r = renet[l];
    if (r.patch_h == 0 || r.patch_w == 0 || r.units == 0) {
      throw ConfigError("ReNet layer " + std::to_string(l) + ": patch extents and units must be positive");
    }
  }
  for (std::size_t l = 0; l < upsample.size(); ++l) {
    const auto& u = upsample[l];
    if (u.filter_h == 0 || u.filter_w == 0 || u.channels == 0) {
      throw ConfigError("upsampling layer " + std::to_string(l) + ": filter extents and channels must be positive");
    }
  }
  const auto down = downsampling();
  const auto up = upsampling();
  if (down != up) {
    std::ostringstream os;
    os << "resolution mismatch: downsampling factor " << down[0] << "x" << down[1]
       << " (front-end and ReNet patches) differs from upsampling factor " << up[0] << "x" << up[1]
       << " (upsampling filters)";
    throw ConfigError(os.str());
  }
  (void)infer_shapes(*this);
}

ModelShapes infer_shapes(const ModelConfig& config) {
  ModelShapes s;
  s.input = {config.input_h, config.input_w, config.input_channels};
  s.frontend = frontend_output_shape(config.frontend, s.input);
  Shape cur = s.frontend;
  for (std::size_t l = 0; l < config.renet.size(); ++l) {
    const auto& r = config.renet[l];
    if (r.patch_h == 0 || r.patch_w == 0 || cur[0] % r.patch_h != 0 || cur[1] % r.patch_w != 0) {
      std::ostringstream os;
      os << "ReNet layer " << l << ": input " << cur[0] << "x" << cur[1] << " is not divisible into " << r.patch_h
         << "x" << r.patch_w << " patches; resize the input or choose a patch size that divides it";
      throw ConfigError(os.str());
    }
    cur = {cur[0] / r.patch_h, cur[1] / r.patch_w, 2 * r.units};
    s.renet.push_back(cur);
  }
  for (const auto& u : config.upsample) {
    cur = {cur[0] * u.filter_h, cur[1] * u.filter_w, u.channels};
    s.upsample.push_back(cur);
  }
  s.output = {cur[0], cur[1], config.classes};
  if (cur[0] != config.input_h || cur[1] != config.input_w) {
    std::ostringstream os;
    os << "model output " << cur[0] << "x" << cur[1] << " does not match input " << config.input_h << "x"
       << config.input_w;
    throw ConfigError(os.str());
  }
  return s;
}

namespace detail {

std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  const ModelShapes shapes = infer_shapes(config);
  std::vector<ParamSpec> specs;

  std::size_t conv_index = 0;
  for (const auto& st : config.frontend) {
    if (st.kind != FrontendStage::Kind::conv) continue;
    const auto& c = st.conv;
    const std::string base = "frontend." + std::to_string(conv_index++);
    specs.push_back({base + ".kernel", c.kernel_shape(), ParamInit::glorot, c.kernel_h * c.kernel_w * c.in_channels,
                     c.kernel_h * c.kernel_w * c.out_channels, config.frontend_frozen, true});
    specs.push_back({base + ".bias", {c.out_channels}, ParamInit::zero, 0, 0, config.frontend_frozen, false});
  }

  Shape cur = shapes.frontend;
  for (std::size_t l = 0; l < config.renet.size(); ++l) {
    const auto& r = config.renet[l];
    const std::size_t u = r.units;
    const std::size_t vertical_in = r.patch_h * r.patch_w * cur[2];
    for (Direction d : {Direction::down, Direction::up, Direction::right, Direction::left}) {
      const std::size_t in = (d == Direction::down || d == Direction::up) ? vertical_in : 2 * u;
      const std::string base = "renet." + std::to_string(l) + "." + to_string(d) + ".";
      for (std::size_t k = 0; k < 3; ++k) {
        specs.push_back({base + kGruTensorNames[k], {in, u}, ParamInit::glorot, in, u, false, true});
      }
      for (std::size_t k = 3; k < 6; ++k) {
        specs.push_back({base + kGruTensorNames[k], {u, u}, ParamInit::orthonormal, u, u, false, true});
      }
      for (std::size_t k = 6; k < 9; ++k) {
        specs.push_back({base + kGruTensorNames[k], {u}, ParamInit::zero, 0, 0, false, false});
      }
    }
    cur = shapes.renet[l];
  }

  for (std::size_t l = 0; l < config.upsample.size(); ++l) {
    const auto& u = config.upsample[l];
    const ConvSpec spec = upsample_spec(u, cur[2]);
    const std::string base = "upsample." + std::to_string(l);
    specs.push_back({base + ".kernel", spec.kernel_shape(), ParamInit::glorot, u.filter_h * u.filter_w * cur[2],
                     u.filter_h * u.filter_w * u.channels, false, true});
    specs.push_back({base + ".bias", {u.channels}, ParamInit::zero, 0, 0, false, false});
    cur = shapes.upsample[l];
  }

  specs.push_back({"classifier.kernel", {1, 1, cur[2], config.classes}, ParamInit::glorot, cur[2], config.classes,
                   false, true});
  specs.push_back({"classifier.bias", {config.classes}, ParamInit::zero, 0, 0, false, false});
  return specs;
}

ConvSpec upsample_spec(const UpsampleLayerConfig& layer, std::size_t input_channels) {
  // Adjoint convention: the ConvSpec describes the convolution this layer transposes.
  return ConvSpec::tied(layer.filter_h, layer.filter_w, layer.channels, input_channels);
}

ConvSpec classifier_spec(std::size_t input_channels, std::size_t classes) {
  return ConvSpec{1, 1, input_channels, classes, 1, 1, {}};
}

}  // namespace detail

std::vector<std::string> parameter_ids(const ModelConfig& config) {
  std::vector<std::string> ids;
  for (const auto& s : detail::parameter_specs(config)) ids.push_back(s.id);
  return ids;
}

template <typename T>
BasicTensor<T> init_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  if (rows == 0 || cols == 0) throw ConfigError("init_orthonormal: extents must be positive");
  const std::size_t tall = std::max(rows, cols), narrow = std::min(rows, cols);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd a(tall, narrow);
  for (std::size_t i = 0; i < tall; ++i) {
    for (std::size_t j = 0; j < narrow; ++j) a(i, j) = gauss(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, narrow);
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(narrow, narrow);
  for (std::size_t j = 0; j < narrow; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  BasicTensor<T> out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = static_cast<T>(rows >= cols ? q(i, j) : q(j, i));
  }
  return out;
}

template <typename T>
BasicTensor<T> init_glorot(std::size_t fan_in, std::size_t fan_out, Shape shape, std::mt19937_64& rng) {
  if (fan_in == 0 || fan_out == 0) throw ConfigError("init_glorot: fans must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  BasicTensor<T> out(std::move(shape));
  for (auto& v : out.values()) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
BasicModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  BasicModel<T> model;
  model.config_ = config;
  model.config_.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& s : detail::parameter_specs(config)) {
    BasicTensor<T> value(s.shape);
    switch (s.init) {
      case detail::ParamInit::glorot:
        value = init_glorot<T>(s.fan_in, s.fan_out, s.shape, rng);
        break;
      case detail::ParamInit::orthonormal:
        value = init_orthonormal<T>(s.shape[0], s.shape[1], rng);
        break;
      case detail::ParamInit::zero:
        break;
    }
    model.params_.push_back({s.id, std::move(value), s.frozen, s.decays});
  }
  return model;
}

template <typename T>
BasicModel<T> assemble_model(ModelConfig config, std::vector<Parameter<T>> params) {
  config.validate();
  BasicModel<T> model;
  model.config_ = std::move(config);
  model.params_ = std::move(params);
  model.check_consistency();
  return model;
}

template <typename T>
void BasicModel<T>::check_consistency() const {
  const auto specs = detail::parameter_specs(config_);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (k >= params_.size()) throw ShapeError("parameter '" + specs[k].id + "' is missing");
    if (params_[k].id != specs[k].id) {
      throw ShapeError("parameter '" + params_[k].id + "' found where '" + specs[k].id + "' is expected");
    }
    if (params_[k].value.shape() != specs[k].shape) {
      throw ShapeError("parameter '" + specs[k].id + "' has shape " + to_string(params_[k].value.shape()) +
                       ", the architecture needs " + to_string(specs[k].shape));
    }
  }
  if (params_.size() > specs.size()) {
    throw ShapeError("unexpected parameter '" + params_[specs.size()].id + "'");
  }
}

template <typename T>
Parameter<T>& BasicModel<T>::parameter(std::string_view id) {
  for (auto& p : params_) {
    if (p.id == id) return p;
  }
  throw ConfigError("unknown parameter '" + std::string(id) + "'");
}

template <typename T>
const Parameter<T>& BasicModel<T>::parameter(std::string_view id) const {
  for (const auto& p : params_) {
    if (p.id == id) return p;
  }
  throw ConfigError("unknown parameter '" + std::string(id) + "'");
}

template <typename T>
bool BasicModel<T>::has_parameter(std::string_view id) const {
  for (const auto& p : params_) {
    if (p.id == id) return true;
  }
  return false;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void BasicModel<T>::set_frontend_frozen(bool frozen) {
  config_.frontend_frozen = frozen;
  for (auto& p : params_) {
    if (p.id.rfind("frontend.", 0) == 0) p.frozen = frozen;
  }
}

template <typename T>
ReNetParams<T> BasicModel<T>::renet_params(std::size_t layer) const {
  const auto& cfg = config_.renet.at(layer);
  ReNetParams<T> r;
  r.patch_h = cfg.patch_h;
  r.patch_w = cfg.patch_w;
  const std::string prefix = "renet." + std::to_string(layer) + ".";
  for (auto [sweep, d] : {std::pair{&r.down, Direction::down}, std::pair{&r.up, Direction::up},
                          std::pair{&r.right, Direction::right}, std::pair{&r.left, Direction::left}}) {
    sweep->direction = d;
    auto dst = sweep->gru.tensors();
    for (std::size_t k = 0; k < 9; ++k) {
      *dst[k] = parameter(prefix + to_string(d) + "." + kGruTensorNames[k]).value;
    }
  }
  return r;
}

template <typename T>
void BasicModel<T>::check_image(const Shape& shape) const {
  const Shape want{config_.input_h, config_.input_w, config_.input_channels};
  if (shape != want) {
    throw DimensionError("image extents " + to_string(shape) + " do not match the model input " + to_string(want));
  }
}

template <typename T>
BasicTensor<T> BasicModel<T>::logits(const BasicTensor<T>& image, SweepExecution execution) const {
  check_image(image.shape());
  FrontendParams<T> fp;
  fp.stages = config_.frontend;
  std::size_t conv_index = 0;
  for (const auto& st : config_.frontend) {
    if (st.kind != FrontendStage::Kind::conv) continue;
    const std::string base = "frontend." + std::to_string(conv_index++);
    fp.kernels.push_back(parameter(base + ".kernel").value);
    fp.biases.push_back(parameter(base + ".bias").value);
  }
  BasicTensor<T> h = conv_frontend(fp, image);
  for (std::size_t l = 0; l < config_.renet.size(); ++l) h = renet_layer(renet_params(l), h, execution);
  for (std::size_t l = 0; l < config_.upsample.size(); ++l) {
    const std::string base = "upsample." + std::to_string(l);
    h = upsample_layer(detail::upsample_spec(config_.upsample[l], h.channels()), parameter(base + ".kernel").value,
                       parameter(base + ".bias").value, h);
  }
  return conv2d(h, detail::classifier_spec(h.channels(), config_.classes), parameter("classifier.kernel").value,
                parameter("classifier.bias").value);
}

template <typename T>
BasicTensor<T> BasicModel<T>::forward(const BasicTensor<T>& image, SweepExecution execution) const {
  return softmax_channels(logits(image, execution));
}

template <typename T>
ModelVars BasicModel<T>::register_parameters(Tape<T>& tape) const {
  ModelVars v;
  std::map<std::string, Var, std::less<>> by_id;
  for (const auto& p : params_) {
    const Var var = tape.parameter(p.id, p.value, p.frozen);
    by_id.emplace(p.id, var);
    v.all.push_back(var);
  }
  std::size_t conv_index = 0;
  for (const auto& st : config_.frontend) {
    if (st.kind != FrontendStage::Kind::conv) continue;
    const std::string base = "frontend." + std::to_string(conv_index++);
    v.frontend_kernels.push_back(by_id.at(base + ".kernel"));
    v.frontend_biases.push_back(by_id.at(base + ".bias"));
  }
  for (std::size_t l = 0; l < config_.renet.size(); ++l) {
    ad::ReNetVars rv;
    rv.patch_h = config_.renet[l].patch_h;
    rv.patch_w = config_.renet[l].patch_w;
    const std::string prefix = "renet." + std::to_string(l) + ".";
    for (auto [gv, d] : {std::pair{&rv.down, Direction::down}, std::pair{&rv.up, Direction::up},
                         std::pair{&rv.right, Direction::right}, std::pair{&rv.left, Direction::left}}) {
      for (std::size_t k = 0; k < 9; ++k) (*gv)[k] = by_id.at(prefix + to_string(d) + "." + kGruTensorNames[k]);
    }
    v.renet.push_back(rv);
  }
  for (std::size_t l = 0; l < config_.upsample.size(); ++l) {
    const std::string base = "upsample." + std::to_string(l);
    v.upsample_kernels.push_back(by_id.at(base + ".kernel"));
    v.upsample_biases.push_back(by_id.at(base + ".bias"));
  }
  v.classifier_kernel = by_id.at("classifier.kernel");
  v.classifier_bias = by_id.at("classifier.bias");
  return v;
}

template <typename T>
Var BasicModel<T>::record_forward(Tape<T>& tape, const ModelVars& vars, Var image, SweepExecution execution) const {
  check_image(tape.value(image).shape());
  Var h = ad::conv_frontend(tape, config_.frontend, vars.frontend_kernels, vars.frontend_biases, image);
  for (const auto& rv : vars.renet) h = ad::renet_layer(tape, rv, h, execution);
  for (std::size_t l = 0; l < config_.upsample.size(); ++l) {
    const ConvSpec spec = detail::upsample_spec(config_.upsample[l], tape.value(h).channels());
    h = ad::upsample_layer(tape, spec, vars.upsample_kernels[l], vars.upsample_biases[l], h);
  }
  const ConvSpec head = detail::classifier_spec(tape.value(h).channels(), config_.classes);
  const Var logits = ad::conv2d(tape, h, head, vars.classifier_kernel, vars.classifier_bias);
  return ad::softmax_channels(tape, logits);
}

#define RESEG_INSTANTIATE_MODEL(T)                                                                  \
  template class BasicModel<T>;                                                                     \
  template BasicModel<T> build_model<T>(const ModelConfig&, std::uint64_t);                         \
  template BasicModel<T> assemble_model<T>(ModelConfig, std::vector<Parameter<T>>);                 \
  template BasicTensor<T> init_orthonormal<T>(std::size_t, std::size_t, std::mt19937_64&);          \
  template BasicTensor<T> init_glorot<T>(std::size_t, std::size_t, Shape, std::mt19937_64&);

RESEG_INSTANTIATE_MODEL(float)
RESEG_INSTANTIATE_MODEL(double)

#undef RESEG_INSTANTIATE_MODEL

}  // namespace reseg
