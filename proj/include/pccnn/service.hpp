#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "pccnn/checkpoint.hpp"
#include "pccnn/sampling.hpp"

namespace pccnn {

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  int max_queue = 4;  // requests admitted to model work at once; the rest get 429
  int max_samples = 16;
  double min_temperature = 0.1;
  double max_temperature = 2.0;
};

/// Request handlers for /health, /inpaint and /probmap. Transport-free so they
/// can be exercised directly; `mount` attaches them to an httplib server.
class InpaintService {
 public:
  InpaintService(std::shared_ptr<const Model<float>> model, std::string model_id, ServiceOptions options = {})
      : model_(std::move(model)), model_id_(std::move(model_id)), options_(options) {
    if (options_.max_queue < 1) throw ValidationError("max queue must be >= 1");
  }

  /// Holds one unit of queue capacity while alive.
  class Slot {
   public:
    explicit Slot(std::atomic<int>* counter) : counter_(counter) {}
    Slot(Slot&& o) noexcept : counter_(std::exchange(o.counter_, nullptr)) {}
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;
    Slot& operator=(Slot&&) = delete;
    ~Slot() {
      if (counter_) counter_->fetch_sub(1);
    }

   private:
    std::atomic<int>* counter_;
  };

  std::optional<Slot> admit() {
    int cur = in_flight_.load();
    while (cur < options_.max_queue) {
      if (in_flight_.compare_exchange_weak(cur, cur + 1)) return Slot(&in_flight_);
    }
    return std::nullopt;
  }

  HttpReply health() const {
    if (!model_) return {503, {{"status", "unavailable"}, {"message", "no model loaded"}}};
    return {200, {{"status", "ok"}, {"model_id", model_id_}, {"signature", model_->signature()}}};
  }

  HttpReply inpaint(const std::string& body) {
    if (!model_) return error(503, "model_unavailable", "", "no model loaded");
    const Signature sig = model_->signature();
    nlohmann::json req;
    Image image;
    Mask mask;
    int num_samples = 8;
    std::uint64_t seed = 0;
    double temperature = 1.0;
    try {
      req = parse_object(body);
      image = parse_image(req, sig);
      mask = parse_mask(req, sig);
      if (req.contains("num_samples")) {
        num_samples = int_field(req, "num_samples");
        if (num_samples < 1 || num_samples > options_.max_samples) {
          throw RequestError(422, "out_of_range", "num_samples",
                             "num_samples must be in [1, " + std::to_string(options_.max_samples) + "]");
        }
      }
      if (req.contains("seed") && !req["seed"].is_null()) {
        if (!req["seed"].is_number_unsigned()) {
          throw RequestError(400, "invalid_request", "seed", "seed must be a non-negative integer");
        }
        seed = req["seed"].get<std::uint64_t>();
      } else {
        seed = std::random_device{}();
      }
      if (req.contains("temperature")) {
        if (!req["temperature"].is_number()) {
          throw RequestError(400, "invalid_request", "temperature", "temperature must be a number");
        }
        temperature = req["temperature"].get<double>();
        if (!(temperature >= options_.min_temperature && temperature <= options_.max_temperature)) {
          throw RequestError(422, "out_of_range", "temperature", "temperature must be in [0.1, 2.0]");
        }
      }
    } catch (const RequestError& e) {
      return error(e.status, e.code, e.field, e.what());
    }

    auto slot = admit();
    if (!slot) return error(429, "queue_full", "", "too many requests in flight");
    const auto seeds = sample_seeds(seed, static_cast<std::size_t>(num_samples));
    auto results = sample_inpaintings(*model_, image, mask, seeds, temperature);
    const auto ranking = rank_inpaintings(results);
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i : ranking.order) {
      const auto& r = results[i];
      samples.push_back({{"image", image_to_json(r.image)},
                         {"log_likelihood", r.total_log_likelihood},
                         {"per_pixel_mean_log_likelihood", r.per_pixel_mean()}});
    }
    return {200, {{"model_id", model_id_}, {"seed", seed}, {"samples", samples}}};
  }

  HttpReply probmap(const std::string& body) {
    if (!model_) return error(503, "model_unavailable", "", "no model loaded");
    const Signature sig = model_->signature();
    if (sig.levels != 2 || sig.channels != 1) {
      return error(422, "unsupported_model", "", "probability maps need a binary model, loaded " + sig.to_string());
    }
    Image image;
    Mask mask;
    try {
      const auto req = parse_object(body);
      image = parse_image(req, sig);
      mask = parse_mask(req, sig);
    } catch (const RequestError& e) {
      return error(e.status, e.code, e.field, e.what());
    }
    auto slot = admit();
    if (!slot) return error(429, "queue_full", "", "too many requests in flight");
    const auto map = probability_map(*model_, image, mask);
    nlohmann::json rows = nlohmann::json::array();
    for (int y = 0; y < map.height; ++y) {
      nlohmann::json row = nlohmann::json::array();
      for (int x = 0; x < map.width; ++x) row.push_back(map.at(y, x));
      rows.push_back(row);
    }
    return {200, {{"map", rows}}};
  }

  void mount(httplib::Server& server) {
    auto send = [](httplib::Response& res, const HttpReply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Post("/inpaint",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, inpaint(req.body)); });
    server.Post("/probmap",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, probmap(req.body)); });
    server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      send(res, error(500, "internal", "", what));
    });
  }

  static nlohmann::json image_to_json(const Image& img) {
    nlohmann::json rows = nlohmann::json::array();
    for (int y = 0; y < img.height(); ++y) {
      nlohmann::json row = nlohmann::json::array();
      for (int x = 0; x < img.width(); ++x) {
        if (img.channels() == 1) {
          row.push_back(img.at(y, x));
        } else {
          nlohmann::json px = nlohmann::json::array();
          for (int c = 0; c < img.channels(); ++c) px.push_back(img.at(y, x, c));
          row.push_back(px);
        }
      }
      rows.push_back(row);
    }
    return rows;
  }

  static nlohmann::json mask_to_json(const Mask& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int y = 0; y < m.height(); ++y) {
      nlohmann::json row = nlohmann::json::array();
      for (int x = 0; x < m.width(); ++x) row.push_back(m.at(y, x));
      rows.push_back(row);
    }
    return rows;
  }

 private:
  struct RequestError : std::runtime_error {
    RequestError(int s, std::string c, std::string f, const std::string& msg)
        : std::runtime_error(msg), status(s), code(std::move(c)), field(std::move(f)) {}
    int status;
    std::string code;
    std::string field;
  };

  static HttpReply error(int status, const std::string& code, const std::string& field, const std::string& message) {
    nlohmann::json body{{"code", code}, {"message", message}};
    if (!field.empty()) body["field"] = field;
    return {status, body};
  }

  static nlohmann::json parse_object(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw RequestError(400, "invalid_json", "body", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw RequestError(400, "invalid_request", "body", "request body must be a JSON object");
    return j;
  }

  static int int_field(const nlohmann::json& j, const char* name) {
    const auto& v = j.at(name);
    if (!v.is_number_integer()) throw RequestError(400, "invalid_request", name, std::string(name) + " must be an integer");
    return v.get<int>();
  }

  /// Checks an H x W nested array and returns it.
  static const nlohmann::json& grid(const nlohmann::json& req, const char* field, const Signature& sig) {
    if (!req.contains(field)) throw RequestError(400, "invalid_request", field, std::string("missing ") + field);
    const auto& g = req[field];
    const std::string shape = std::to_string(sig.height) + "x" + std::to_string(sig.width);
    if (!g.is_array() || static_cast<int>(g.size()) != sig.height) {
      throw RequestError(400, "shape_mismatch", field, std::string(field) + " must have " + shape + " entries");
    }
    for (const auto& row : g) {
      if (!row.is_array() || static_cast<int>(row.size()) != sig.width) {
        throw RequestError(400, "shape_mismatch", field, std::string(field) + " must have " + shape + " entries");
      }
    }
    return g;
  }

  static int level_value(const nlohmann::json& v, const char* field, int hi) {
    if (!v.is_number_integer()) throw RequestError(400, "invalid_request", field, std::string(field) + " values must be integers");
    const auto x = v.get<std::int64_t>();
    if (x < 0 || x > hi) {
      throw RequestError(422, "out_of_range", field,
                         std::string(field) + " values must be in [0, " + std::to_string(hi) + "]");
    }
    return static_cast<int>(x);
  }

  static Image parse_image(const nlohmann::json& req, const Signature& sig) {
    const auto& g = grid(req, "image", sig);
    Image img(sig);
    for (int y = 0; y < sig.height; ++y) {
      for (int x = 0; x < sig.width; ++x) {
        const auto& px = g[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
        if (sig.channels == 1 && !px.is_array()) {
          img.set(y, x, 0, static_cast<std::uint8_t>(level_value(px, "image", sig.levels - 1)));
          continue;
        }
        if (!px.is_array() || static_cast<int>(px.size()) != sig.channels) {
          throw RequestError(400, "shape_mismatch", "image",
                             "image pixels must hold " + std::to_string(sig.channels) + " channel values");
        }
        for (int c = 0; c < sig.channels; ++c) {
          img.set(y, x, c, static_cast<std::uint8_t>(level_value(px[static_cast<std::size_t>(c)], "image", sig.levels - 1)));
        }
      }
    }
    return img;
  }

  static Mask parse_mask(const nlohmann::json& req, const Signature& sig) {
    const auto& g = grid(req, "mask", sig);
    Mask m(sig.height, sig.width);
    for (int y = 0; y < sig.height; ++y)
      for (int x = 0; x < sig.width; ++x)
        m.set(y, x, static_cast<std::uint8_t>(level_value(g[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)], "mask", 1)));
    return m;
  }

  std::shared_ptr<const Model<float>> model_;
  std::string model_id_;
  ServiceOptions options_;
  std::atomic<int> in_flight_{0};
};

/// Model id: checkpoint file name plus the first 12 hex digits of its SHA-256.
inline std::string model_id_for(const std::filesystem::path& ckpt) {
  return ckpt.filename().string() + "@" + sha256_file(ckpt).substr(0, 12);
}

}  // namespace pccnn
