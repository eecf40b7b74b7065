#pragma once

// Embedding provider backed by an HTTP encoder service.
//
// Protocol: GET /embed?sample=<id>&branch=<tag>
// Body:     u32 little-endian tensor count, then back-to-back MCLE records.
//           The first record is the global embedding, the rest are locals.

#include <httplib.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>

#include "zs3d/tensor_io.hpp"

namespace zs3d {

class TransportError : public InputError {
 public:
  TransportError(int status, const std::string& what) : InputError(what), status_(status) {}
  /// HTTP status, or 0 when no response was received.
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class MalformedBody : public InputError {
 public:
  using InputError::InputError;
};

/// Encodes a bundle as a service response body.
inline std::string encode_bundle_body(const EmbeddingBundle& b) {
  std::string out;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(1 + b.locals.size()));
  out += encode_mcle(b.global);
  for (const auto& l : b.locals) out += encode_mcle(l);
  return out;
}

inline EmbeddingBundle parse_bundle_body(std::string_view body, std::string source_id) {
  if (body.size() < 4) throw MalformedBody(source_id + ": body shorter than tensor count");
  const auto count = detail::get_le<std::uint32_t>(reinterpret_cast<const unsigned char*>(body.data()));
  if (count < 2) {
    throw MalformedBody(source_id + ": bundle needs at least 2 tensors, body declares " +
                        std::to_string(count));
  }
  std::istringstream in{std::string(body.substr(4))};
  std::vector<EmbeddingTensor> tensors;
  try {
    for (std::uint32_t i = 0; i < count; ++i) tensors.push_back(read_mcle(in));
  } catch (const McleError& e) {
    throw MalformedBody(source_id + ": " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw MalformedBody(source_id + ": trailing bytes after " + std::to_string(count) + " tensors");
  }
  EmbeddingBundle b{std::move(tensors.front()), {}, std::move(source_id)};
  b.locals.assign(std::make_move_iterator(tensors.begin() + 1), std::make_move_iterator(tensors.end()));
  return b;
}

class ServiceProvider final : public EmbeddingProvider {
 public:
  /// `endpoint` is a base URL such as "http://127.0.0.1:8080".
  explicit ServiceProvider(std::string endpoint, NamingConvention naming = {})
      : endpoint_(std::move(endpoint)), naming_(naming) {}

  EmbeddingBundle fetch(std::string_view sample, std::string_view branch) const override {
    const std::size_t layers = naming_.layers_for(branch);
    // A client per call keeps concurrent fetches independent.
    httplib::Client client(endpoint_);
    client.set_connection_timeout(5);
    client.set_read_timeout(30);
    httplib::Params params{{"sample", std::string(sample)}, {"branch", std::string(branch)}};
    auto res = client.Get("/embed", params, httplib::Headers{});
    const std::string id = std::string(sample) + "/" + std::string(branch);
    if (!res) {
      throw TransportError(0, id + ": request to " + endpoint_ + " failed: " +
                                  httplib::to_string(res.error()));
    }
    if (res->status < 200 || res->status >= 300) {
      throw TransportError(res->status, id + ": service returned HTTP " + std::to_string(res->status));
    }
    auto b = parse_bundle_body(res->body, id);
    b.validate(layers);
    return b;
  }

 private:
  std::string endpoint_;
  NamingConvention naming_;
};

}  // namespace zs3d
