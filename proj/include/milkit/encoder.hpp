#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/error.hpp"
#include "milkit/rng.hpp"
#include "milkit/tensor.hpp"
#include "milkit/textio.hpp"

namespace milkit {

/// Grayscale image, row-major pixels in [0, 1].
struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }

  bool operator==(const ImageGrid&) const = default;
};

/// Split a square image into its N x N grid of P x P patches. Row j of the
/// result is patch j (grid order row-major), flattened row-major.
inline Tensor patchify(const ImageGrid& image, std::size_t patch) {
  require(patch > 0, "patchify: patch side must be positive");
  require(image.height > 0 && image.width > 0 && image.pixels.size() == image.height * image.width,
          "patchify: malformed image");
  require(image.height % patch == 0 && image.width % patch == 0,
          "patchify: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
              " is not divisible by patch side " + std::to_string(patch));
  require(image.height == image.width, "patchify: image must be square");
  const std::size_t n = image.height / patch;
  Tensor out({n * n, patch * patch});
  for (std::size_t gr = 0; gr < n; ++gr)
    for (std::size_t gc = 0; gc < n; ++gc) {
      const std::size_t row = gr * n + gc;
      for (std::size_t pr = 0; pr < patch; ++pr)
        for (std::size_t pc = 0; pc < patch; ++pc)
          out.at(row, pr * patch + pc) = image.at(gr * patch + pr, gc * patch + pc);
    }
  return out;
}

inline ImageGrid unpatchify(const Tensor& patches, std::size_t patch) {
  require(patches.rank() == 2 && patches.cols() == patch * patch, "unpatchify: expected rows of P*P values");
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches.rows()))));
  require(n * n == patches.rows(), "unpatchify: patch count is not a perfect square");
  ImageGrid image{n * patch, n * patch, std::vector<double>(n * patch * n * patch)};
  for (std::size_t gr = 0; gr < n; ++gr)
    for (std::size_t gc = 0; gc < n; ++gc)
      for (std::size_t pr = 0; pr < patch; ++pr)
        for (std::size_t pc = 0; pc < patch; ++pc)
          image.at(gr * patch + pr, gc * patch + pc) = patches.at(gr * n + gc, pr * patch + pc);
  return image;
}

/// Shared two-layer patch embedder: relu(W1 p + b1) then W2 (.) + b2.
struct EncoderParams {
  std::size_t patch = 0;
  std::size_t hidden = 0;
  std::size_t dim = 0;
  Tensor w1;  // hidden x patch^2
  Tensor b1;  // hidden
  Tensor w2;  // dim x hidden
  Tensor b2;  // dim

  std::size_t input_width() const { return patch * patch; }

  void validate() const {
    require(patch > 0 && hidden > 0 && dim > 0, "encoder: dimensions must be positive");
    require(w1.shape() == Shape{hidden, input_width()}, "encoder: W1 shape " + shape_string(w1.shape()));
    require(b1.size() == hidden, "encoder: b1 length");
    require(w2.shape() == Shape{dim, hidden}, "encoder: W2 shape " + shape_string(w2.shape()));
    require(b2.size() == dim, "encoder: b2 length");
  }
};

/// Kaiming-style uniform weights, bound sqrt(6 / fan_in); zero biases.
/// Draw order: W1 then W2, row-major.
inline EncoderParams init_encoder(std::size_t patch, std::size_t hidden, std::size_t dim, RandomStream& stream) {
  require(patch > 0 && hidden > 0 && dim > 0, "init_encoder: dimensions must be positive");
  EncoderParams p;
  p.patch = patch;
  p.hidden = hidden;
  p.dim = dim;
  const double bound1 = std::sqrt(6.0 / static_cast<double>(patch * patch));
  const double bound2 = std::sqrt(6.0 / static_cast<double>(hidden));
  p.w1 = uniform_tensor(stream, {hidden, patch * patch}, -bound1, bound1);
  p.b1 = Tensor({hidden});
  p.w2 = uniform_tensor(stream, {dim, hidden}, -bound2, bound2);
  p.b2 = Tensor({dim});
  return p;
}

/// Encoder parameters already recorded as graph leaves.
struct EncoderVars {
  Var w1, b1, w2, b2;
};

inline EncoderVars record_encoder(Graph& g, const EncoderParams& p) {
  return EncoderVars{g.leaf(p.w1), g.leaf(p.b1), g.leaf(p.w2), g.leaf(p.b2)};
}

inline Var encode(Graph& g, Var patches, const EncoderVars& vars) {
  const Var hidden = relu(g, matmul_bias(g, vars.w1, patches, vars.b1));
  return matmul_bias(g, vars.w2, hidden, vars.b2);
}

inline Tensor encode(const Tensor& patches, const EncoderParams& params) {
  params.validate();
  require(patches.rank() == 2 && patches.cols() == params.input_width(),
          "encode: expected " + std::to_string(params.input_width()) + " columns, got " +
              shape_string(patches.shape()));
  Graph g;
  const auto vars = record_encoder(g, params);
  return g.value(encode(g, g.leaf(patches), vars));
}

// ---------------------------------------------------------------------------
// PGM image files: maxval 255, pixel v maps to v / 255.

inline ImageGrid image_from_greymap(const Greymap& map) {
  ImageGrid image{map.height, map.width, std::vector<double>(map.pixels.size())};
  for (std::size_t i = 0; i < map.pixels.size(); ++i) image.pixels[i] = map.pixels[i] / 255.0;
  return image;
}

/// Quantise to the nearest level (round half up). Exact for images already on the 1/255 lattice.
inline Greymap greymap_from_image(const ImageGrid& image) {
  Greymap map{image.width, image.height, 255, std::vector<int>(image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    map.pixels[i] = static_cast<int>(std::floor(255.0 * v + 0.5));
  }
  return map;
}

inline ImageGrid read_pgm_image(const std::filesystem::path& path) {
  return image_from_greymap(parse_pgm(read_file(path)));
}

inline void write_pgm_image(const std::filesystem::path& path, const ImageGrid& image) {
  write_file(path, format_pgm(greymap_from_image(image)));
}

}  // namespace milkit
