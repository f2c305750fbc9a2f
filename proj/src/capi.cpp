// SPDX-License-Identifier: Apache-2.0
#include "reseg/reseg.h"

#include <cstdio>
#include <cstring>
#include <string>

#include "commands.hpp"
#include "reseg/errors.hpp"
#include "reseg/model_io.hpp"

struct reseg_model {
  reseg::Model model;
};

namespace {

thread_local std::string g_last_error;

reseg_status fail(reseg_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Maps the library exception hierarchy onto status codes. Order matters:
// subclasses are caught before their bases.
template <typename Body>
reseg_status guarded(Body&& body) {
  g_last_error.clear();
  try {
    return body();
  } catch (const reseg::VersionError& e) {
    return fail(RESEG_ERR_VERSION, e.what());
  } catch (const reseg::TruncatedError& e) {
    return fail(RESEG_ERR_TRUNCATED, e.what());
  } catch (const reseg::FormatError& e) {
    return fail(RESEG_ERR_FORMAT, e.what());
  } catch (const reseg::ShapeError& e) {
    return fail(RESEG_ERR_SHAPE, e.what());
  } catch (const reseg::DimensionError& e) {
    return fail(RESEG_ERR_DIMENSION, e.what());
  } catch (const reseg::ConfigError& e) {
    return fail(RESEG_ERR_CONFIG, e.what());
  } catch (const reseg::NumericError& e) {
    return fail(RESEG_ERR_NUMERIC, e.what());
  } catch (const reseg::UsageError& e) {
    return fail(RESEG_ERR_USAGE, e.what());
  } catch (const reseg::IoError& e) {
    return fail(RESEG_ERR_IO, e.what());
  } catch (const reseg::DeterminismError& e) {
    return fail(RESEG_ERR_DETERMINISM, e.what());
  } catch (const reseg::UndefinedMetricError& e) {
    return fail(RESEG_ERR_UNDEFINED_METRIC, e.what());
  } catch (const reseg::RefusedError& e) {
    return fail(RESEG_ERR_REFUSED, e.what());
  } catch (const std::bad_alloc&) {
    return fail(RESEG_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(RESEG_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(RESEG_ERR_INTERNAL, "unknown exception");
  }
}

reseg::cmd::Log make_log(reseg_log_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

std::string required(const char* value, const char* what) {
  if (!value || !*value) throw reseg::UsageError(std::string(what) + " is required");
  return value;
}

}  // namespace

extern "C" {

const char* reseg_version(void) {
  return "0.1.0";
}

const char* reseg_status_name(reseg_status status) {
  switch (status) {
    case RESEG_OK:
      return "ok";
    case RESEG_ERR_USAGE:
      return "usage error";
    case RESEG_ERR_CONFIG:
      return "configuration error";
    case RESEG_ERR_DIMENSION:
      return "dimension error";
    case RESEG_ERR_NUMERIC:
      return "numeric error";
    case RESEG_ERR_FORMAT:
      return "format error";
    case RESEG_ERR_VERSION:
      return "version error";
    case RESEG_ERR_TRUNCATED:
      return "truncated file";
    case RESEG_ERR_SHAPE:
      return "shape error";
    case RESEG_ERR_IO:
      return "i/o error";
    case RESEG_ERR_UNDEFINED_METRIC:
      return "undefined metric";
    case RESEG_ERR_DETERMINISM:
      return "determinism error";
    case RESEG_ERR_REFUSED:
      return "refused";
    case RESEG_ERR_CHECK_FAILED:
      return "check failed";
    case RESEG_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

const char* reseg_last_error(void) {
  return g_last_error.c_str();
}

reseg_status reseg_model_build(const char* config_json, reseg_model** out) {
  return guarded([&] {
    if (!out) throw reseg::UsageError("reseg_model_build: out is NULL");
    *out = nullptr;
    const auto config = reseg::model_config_from_json(required(config_json, "config_json"));
    config.validate();
    *out = new reseg_model{reseg::build_model<float>(config)};
    return RESEG_OK;
  });
}

reseg_status reseg_model_load(const char* path, reseg_model** out) {
  return guarded([&] {
    if (!out) throw reseg::UsageError("reseg_model_load: out is NULL");
    *out = nullptr;
    *out = new reseg_model{reseg::load_model(required(path, "path"))};
    return RESEG_OK;
  });
}

reseg_status reseg_model_save(const reseg_model* model, const char* path) {
  return guarded([&] {
    if (!model) throw reseg::UsageError("reseg_model_save: model is NULL");
    reseg::save_model(model->model, required(path, "path"));
    return RESEG_OK;
  });
}

void reseg_model_free(reseg_model* model) {
  delete model;
}

reseg_status reseg_model_input_shape(const reseg_model* model, size_t* height, size_t* width, size_t* channels) {
  return guarded([&] {
    if (!model) throw reseg::UsageError("reseg_model_input_shape: model is NULL");
    const auto& c = model->model.config();
    if (height) *height = c.input_h;
    if (width) *width = c.input_w;
    if (channels) *channels = c.input_channels;
    return RESEG_OK;
  });
}

reseg_status reseg_model_classes(const reseg_model* model, size_t* classes) {
  return guarded([&] {
    if (!model || !classes) throw reseg::UsageError("reseg_model_classes: NULL argument");
    *classes = model->model.config().classes;
    return RESEG_OK;
  });
}

reseg_status reseg_model_parameter_count(const reseg_model* model, size_t* count) {
  return guarded([&] {
    if (!model || !count) throw reseg::UsageError("reseg_model_parameter_count: NULL argument");
    *count = model->model.parameter_count();
    return RESEG_OK;
  });
}

reseg_status reseg_model_config_json(const reseg_model* model, char* buf, size_t buf_len, size_t* needed) {
  return guarded([&] {
    if (!model) throw reseg::UsageError("reseg_model_config_json: model is NULL");
    const std::string text = reseg::to_json_text(model->model.config());
    if (needed) *needed = text.size() + 1;
    if (!buf) return RESEG_OK;
    if (buf_len < text.size() + 1) throw reseg::UsageError("reseg_model_config_json: buffer too small");
    std::memcpy(buf, text.c_str(), text.size() + 1);
    return RESEG_OK;
  });
}

reseg_status reseg_model_forward(const reseg_model* model, const float* image, size_t height, size_t width,
                                 size_t channels, float* probs, size_t probs_len) {
  return guarded([&] {
    if (!model || !image || !probs) throw reseg::UsageError("reseg_model_forward: NULL argument");
    const std::size_t n = height * width * channels;
    reseg::Tensor input({height, width, channels}, std::vector<float>(image, image + n));
    const reseg::Tensor out = model->model.forward(input);
    if (probs_len < out.size()) {
      throw reseg::UsageError("reseg_model_forward: probs holds " + std::to_string(probs_len) + " floats, " +
                              std::to_string(out.size()) + " needed");
    }
    std::memcpy(probs, out.data(), out.size() * sizeof(float));
    return RESEG_OK;
  });
}

void reseg_synth_options_init(reseg_synth_options* o) {
  if (!o) return;
  const reseg::SynthOptions d;
  *o = reseg_synth_options{};
  o->count = d.count;
  o->height = d.height;
  o->width = d.width;
  o->classes = d.classes;
  o->seed = d.seed;
  o->min_shape_fraction = d.min_shape_fraction;
  o->max_shape_fraction = d.max_shape_fraction;
}

reseg_status reseg_synth(const reseg_synth_options* o) {
  return guarded([&] {
    if (!o) throw reseg::UsageError("reseg_synth: options are NULL");
    reseg::cmd::SynthArgs args;
    args.out = required(o->out_dir, "out_dir");
    args.force = o->force != 0;
    args.options.count = o->count;
    args.options.height = o->height;
    args.options.width = o->width;
    args.options.classes = o->classes;
    args.options.seed = o->seed;
    args.options.min_shape_fraction = o->min_shape_fraction;
    args.options.max_shape_fraction = o->max_shape_fraction;
    reseg::cmd::synth(args, make_log(o->log, o->log_user));
    return RESEG_OK;
  });
}

void reseg_train_options_init(reseg_train_options* o) {
  if (!o) return;
  *o = reseg_train_options{};
  o->epochs = o->batch_size = o->seed = o->threads = -1;
}

reseg_status reseg_train(const reseg_train_options* o, reseg_train_summary* summary) {
  return guarded([&] {
    if (!o) throw reseg::UsageError("reseg_train: options are NULL");
    reseg::cmd::TrainArgs args;
    args.config = required(o->config_path, "config_path");
    if (o->out_dir && *o->out_dir) args.out = o->out_dir;
    if (o->manifest && *o->manifest) args.manifest = o->manifest;
    if (o->balance && *o->balance) args.balance = reseg::cmd::parse_balance(o->balance);
    if (o->epochs >= 0) args.epochs = static_cast<std::size_t>(o->epochs);
    if (o->batch_size >= 0) args.batch_size = static_cast<std::size_t>(o->batch_size);
    if (o->seed >= 0) args.seed = static_cast<std::uint64_t>(o->seed);
    if (o->threads >= 0) args.threads = static_cast<std::size_t>(o->threads);
    args.resume = o->resume != 0;
    const auto s = reseg::cmd::train(args, make_log(o->log, o->log_user));
    if (summary) {
      summary->epochs_completed = s.epochs_completed;
      summary->final_loss = s.final_loss;
      summary->best_score = s.best_score;
      summary->aborted = s.aborted ? 1 : 0;
    }
    if (s.aborted) return fail(RESEG_ERR_NUMERIC, "training aborted at " + s.abort_reason);
    return RESEG_OK;
  });
}

void reseg_eval_options_init(reseg_eval_options* o) {
  if (o) *o = reseg_eval_options{};
}

reseg_status reseg_eval(const reseg_eval_options* o, reseg_eval_summary* summary) {
  return guarded([&] {
    if (!o) throw reseg::UsageError("reseg_eval: options are NULL");
    reseg::cmd::EvalArgs args;
    args.model = required(o->model_path, "model_path");
    args.manifest = required(o->manifest, "manifest");
    if (o->split && *o->split) args.split = reseg::parse_split(o->split);
    if (o->csv_out && *o->csv_out) args.csv_out = o->csv_out;
    const auto report = reseg::cmd::eval(args, make_log(o->log, o->log_user));
    if (summary) {
      summary->global_accuracy = report.global_accuracy;
      summary->avg_class_accuracy = report.class_accuracy.mean;
      summary->avg_iou = report.iou.mean;
      summary->pixels = report.matrix.total();
    }
    return RESEG_OK;
  });
}

void reseg_predict_options_init(reseg_predict_options* o) {
  if (o) *o = reseg_predict_options{};
}

reseg_status reseg_predict(const reseg_predict_options* o) {
  return guarded([&] {
    if (!o) throw reseg::UsageError("reseg_predict: options are NULL");
    reseg::cmd::PredictArgs args;
    args.model = required(o->model_path, "model_path");
    args.image = required(o->image_path, "image_path");
    args.out = required(o->out_path, "out_path");
    args.probs = o->probs != 0;
    reseg::cmd::predict(args, make_log(o->log, o->log_user));
    return RESEG_OK;
  });
}

void reseg_gradcheck_options_init(reseg_gradcheck_options* o) {
  if (!o) return;
  const reseg::cmd::GradcheckArgs d;
  *o = reseg_gradcheck_options{};
  o->tolerance = d.tolerance;
  o->epsilon = reseg::GradientCheckOptions{}.epsilon;
  o->seed = d.seed;
  o->max_coordinates = d.max_coordinates;
}

reseg_status reseg_gradcheck(const reseg_gradcheck_options* o, reseg_gradcheck_summary* summary) {
  return guarded([&] {
    if (!o) throw reseg::UsageError("reseg_gradcheck: options are NULL");
    reseg::cmd::GradcheckArgs args;
    if (o->config_path && *o->config_path) args.config = o->config_path;
    args.tolerance = o->tolerance;
    if (o->epsilon > 0.0) args.epsilon = o->epsilon;
    args.seed = o->seed;
    args.max_coordinates = o->max_coordinates;
    args.frozen_frontend = o->frozen_frontend != 0;
    const auto report = reseg::cmd::gradcheck(args, make_log(o->log, o->log_user));
    if (summary) {
      summary->passed = report.passed ? 1 : 0;
      summary->worst_error = report.worst_error;
      summary->parameters = report.parameters.size();
    }
    if (!report.passed) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3e", report.worst_error);
      return fail(RESEG_ERR_CHECK_FAILED,
                  "gradient check failed: worst tensor " + report.worst_parameter + " with relative error " + buf);
    }
    return RESEG_OK;
  });
}

}  // extern "C"
