#pragma once

// Declarative network specs and builders for the four architectures, a graph
// interpreter that executes them on the autodiff tape, the CCM matching head,
// the model-complexity accountant, and checkpoint I/O.
//
// A NetworkSpec is an ordered list of named layer nodes; node inputs refer to
// earlier node names.  Weight sharing is expressed by giving two nodes the
// same param_name: the executor materializes each parameter tensor as one
// tape leaf, so every role sees (and updates) the same weights.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stv/layers.hpp"
#include "stv/tape.hpp"
#include "stv/tensor.hpp"

namespace stv::nn {

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error(m) {}
};
struct CheckpointCorruptError : CheckpointError {
  explicit CheckpointCorruptError(const std::string& m) : CheckpointError(m) {}
};
struct CheckpointVersionError : CheckpointError {
  explicit CheckpointVersionError(const std::string& m) : CheckpointError(m) {}
};
struct CheckpointSpecError : CheckpointError {
  explicit CheckpointSpecError(const std::string& m) : CheckpointError(m) {}
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::maxunpool2d: return "maxunpool2d";
    case LayerKind::deconv2d: return "deconv2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::fully_connected: return "fully_connected";
    case LayerKind::relu: return "relu";
    case LayerKind::l2norm: return "l2norm";
    case LayerKind::softmax: return "softmax";
    case LayerKind::concat: return "concat";
    case LayerKind::subtract_merge: return "subtract_merge";
    case LayerKind::inception_lite: return "inception_lite";
    case LayerKind::input: return "input";
    case LayerKind::crop2d: return "crop2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::reshape_map: return "reshape_map";
  }
  return "?";
}

/// One node of the layer graph.  Only the hyperparameters relevant to `kind`
/// are meaningful.
struct LayerParams {
  LayerKind kind = LayerKind::input;
  std::string name;                 // node (output) name, unique per spec
  std::string param_name;           // parameter prefix; equal names alias weights
  std::vector<std::string> inputs;  // earlier node names

  std::size_t out_channels = 0, kernel = 0, stride = 1, pad = 0;  // conv/deconv
  std::size_t window = 0;                                         // pool
  std::size_t out_dim = 0;                                        // fully connected
  double drop_p = 0.0;                                            // dropout
  double bn_eps = 1e-5, bn_momentum = 0.9;                        // batchnorm
  InceptionLiteCfg inception;                                     // inception_lite
  std::size_t crop_y0 = 0, crop_x0 = 0, crop_h = 0, crop_w = 0;   // crop2d; reshape_map
                                                                  //   reuses out_channels
                                                                  //   x crop_h x crop_w
  HaarPattern pattern = HaarPattern::two_rect_horizontal;         // subtract_merge
  std::string paired_pool;                                        // maxunpool2d
};

struct NetworkSpec {
  std::string name;
  std::string arch;  // ccm_branch | ccm_head | tbe | haarnet | cfr_autoencoder | cfr_classifier
  std::size_t in_channels = 1, in_h = 0, in_w = 0;  // rank-4 entry geometry
  std::size_t in_dim = 0;                           // rank-2 entry width (heads)
  std::size_t embedding_dim = 0;
  std::size_t shared_prefix = 0;
  std::string output;  // name of the output node
  std::vector<LayerParams> layers;

  std::string canonical_text() const;
  std::uint64_t hash() const { return fnv1a64(canonical_text()); }
};

// --- symbolic shape validation -------------------------------------------------

namespace detail {

struct SymbolicShape {
  // rank-4 [C,H,W] per sample or rank-2 [dim] per sample; batch left implicit
  bool is_map = false;
  std::size_t c = 0, h = 0, w = 0;
  std::size_t dim = 0;

  std::string str() const {
    if (is_map)
      return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    return "[" + std::to_string(dim) + "]";
  }
};

}  // namespace detail

/// Propagates shapes through the whole graph; throws on any inconsistency.
/// Returns per-node symbolic shapes.  No parameters are allocated here, so an
/// invalid spec never yields a partially built network.
inline std::map<std::string, detail::SymbolicShape> validate_spec(const NetworkSpec& spec) {
  using detail::SymbolicShape;
  std::map<std::string, SymbolicShape> shapes;
  std::map<std::string, const LayerParams*> nodes;
  auto in_shape = [&](const LayerParams& l, std::size_t idx = 0) -> const SymbolicShape& {
    if (idx >= l.inputs.size())
      throw ShapeError("spec " + spec.name + ": node " + l.name + " missing input " +
                       std::to_string(idx));
    auto it = shapes.find(l.inputs[idx]);
    if (it == shapes.end())
      throw ShapeError("spec " + spec.name + ": node " + l.name +
                       " references unknown input '" + l.inputs[idx] + "'");
    return it->second;
  };
  for (const auto& l : spec.layers) {
    if (l.name.empty()) throw ShapeError("spec " + spec.name + ": unnamed node");
    if (shapes.count(l.name))
      throw ShapeError("spec " + spec.name + ": duplicate node name " + l.name);
    SymbolicShape out;
    switch (l.kind) {
      case LayerKind::input:
        if (spec.in_h > 0) {
          out.is_map = true;
          out.c = spec.in_channels;
          out.h = spec.in_h;
          out.w = spec.in_w;
        } else {
          out.dim = spec.in_dim;
        }
        break;
      case LayerKind::conv2d: {
        const auto& in = in_shape(l);
        if (!in.is_map)
          throw ShapeError("spec " + spec.name + ": conv2d " + l.name + " on non-map input");
        out.is_map = true;
        out.c = l.out_channels;
        out.h = nn::detail::conv_extent(l.name.c_str(), in.h, l.pad, l.kernel, l.stride);
        out.w = nn::detail::conv_extent(l.name.c_str(), in.w, l.pad, l.kernel, l.stride);
        break;
      }
      case LayerKind::deconv2d: {
        const auto& in = in_shape(l);
        out.is_map = true;
        out.c = l.out_channels;
        const long h = static_cast<long>((in.h - 1) * l.stride + l.kernel) -
                       2 * static_cast<long>(l.pad);
        const long w = static_cast<long>((in.w - 1) * l.stride + l.kernel) -
                       2 * static_cast<long>(l.pad);
        if (h < 1 || w < 1)
          throw ShapeError("spec " + spec.name + ": deconv2d " + l.name +
                           " yields empty output");
        out.h = static_cast<std::size_t>(h);
        out.w = static_cast<std::size_t>(w);
        break;
      }
      case LayerKind::maxpool2d: {
        const auto& in = in_shape(l);
        if (in.h + 2 * l.pad < l.window || in.w + 2 * l.pad < l.window)
          throw ShapeError("spec " + spec.name + ": pool " + l.name + " window too large");
        out.is_map = true;
        out.c = in.c;
        out.h = (in.h + 2 * l.pad - l.window) / l.stride + 1;
        out.w = (in.w + 2 * l.pad - l.window) / l.stride + 1;
        break;
      }
      case LayerKind::maxunpool2d: {
        const auto& in = in_shape(l);
        auto pit = nodes.find(l.paired_pool);
        if (pit == nodes.end() || pit->second->kind != LayerKind::maxpool2d)
          throw ShapeError("spec " + spec.name + ": unpool " + l.name +
                           " has no paired pool '" + l.paired_pool + "'");
        const auto& pool_out = shapes.at(l.paired_pool);
        if (in.c != pool_out.c || in.h != pool_out.h || in.w != pool_out.w)
          throw ShapeError("spec " + spec.name + ": unpool " + l.name + " input " +
                           in.str() + " does not match pool output " + pool_out.str());
        out = shapes.at(pit->second->inputs[0]);  // pool's input geometry
        break;
      }
      case LayerKind::batchnorm2d:
      case LayerKind::dropout:
      case LayerKind::relu:
        out = in_shape(l);
        break;
      case LayerKind::crop2d: {
        const auto& in = in_shape(l);
        if (l.crop_y0 + l.crop_h > in.h || l.crop_x0 + l.crop_w > in.w)
          throw ShapeError("spec " + spec.name + ": crop " + l.name + " exceeds input " +
                           in.str());
        out.is_map = true;
        out.c = in.c;
        out.h = l.crop_h;
        out.w = l.crop_w;
        break;
      }
      case LayerKind::flatten: {
        const auto& in = in_shape(l);
        out.dim = in.is_map ? in.c * in.h * in.w : in.dim;
        break;
      }
      case LayerKind::reshape_map: {
        const auto& in = in_shape(l);
        const std::size_t want = l.out_channels * l.crop_h * l.crop_w;
        if (in.is_map || in.dim != want)
          throw ShapeError("spec " + spec.name + ": reshape_map " + l.name + " needs a [" +
                           std::to_string(want) + "] vector, got " + in.str());
        out.is_map = true;
        out.c = l.out_channels;
        out.h = l.crop_h;
        out.w = l.crop_w;
        break;
      }
      case LayerKind::fully_connected: {
        const auto& in = in_shape(l);
        if (in.is_map)
          throw ShapeError("spec " + spec.name + ": fully_connected " + l.name +
                           " needs flattened input");
        out.dim = l.out_dim;
        break;
      }
      case LayerKind::l2norm:
      case LayerKind::softmax:
        out = in_shape(l);
        break;
      case LayerKind::concat: {
        if (l.inputs.size() < 2)
          throw ShapeError("spec " + spec.name + ": concat " + l.name + " needs >= 2 inputs");
        const auto& first = in_shape(l, 0);
        if (first.is_map) {
          out.is_map = true;
          out.h = first.h;
          out.w = first.w;
          for (std::size_t i = 0; i < l.inputs.size(); ++i) {
            const auto& s = in_shape(l, i);
            if (!s.is_map || s.h != first.h || s.w != first.w)
              throw ShapeError("spec " + spec.name + ": concat " + l.name +
                               " mixes incompatible maps");
            out.c += s.c;
          }
        } else {
          for (std::size_t i = 0; i < l.inputs.size(); ++i) {
            const auto& s = in_shape(l, i);
            if (s.is_map)
              throw ShapeError("spec " + spec.name + ": concat " + l.name +
                               " mixes maps and vectors");
            out.dim += s.dim;
          }
        }
        break;
      }
      case LayerKind::subtract_merge: {
        const std::size_t want = l.pattern == HaarPattern::four_rect_checker ? 4 : 2;
        if (l.inputs.size() != want)
          throw ShapeError("spec " + spec.name + ": subtract_merge " + l.name + " expects " +
                           std::to_string(want) + " inputs");
        const auto& first = in_shape(l, 0);
        for (std::size_t i = 1; i < l.inputs.size(); ++i) {
          const auto& s = in_shape(l, i);
          if (s.is_map != first.is_map || s.c != first.c || s.h != first.h ||
              s.w != first.w || s.dim != first.dim)
            throw ShapeError("spec " + spec.name + ": subtract_merge " + l.name +
                             " inputs disagree: " + first.str() + " vs " + s.str());
        }
        out = first;
        break;
      }
      case LayerKind::inception_lite: {
        const auto& in = in_shape(l);
        if (!in.is_map)
          throw ShapeError("spec " + spec.name + ": inception " + l.name + " on non-map");
        if (l.inception.total() == 0)
          throw ShapeError("spec " + spec.name + ": inception " + l.name + " has no paths");
        out.is_map = true;
        out.c = l.inception.total();
        out.h = in.h;
        out.w = in.w;
        break;
      }
    }
    shapes[l.name] = out;
    nodes[l.name] = &l;
  }
  if (!spec.output.empty() && !shapes.count(spec.output))
    throw ShapeError("spec " + spec.name + ": output node '" + spec.output + "' missing");
  return shapes;
}

// --- parameter allocation -------------------------------------------------------

struct Network {
  NetworkSpec spec;
  std::map<std::string, Tensor> params;            // "<param_name>.w" etc.
  std::map<std::string, BatchNormState> bn_state;  // per batchnorm param_name
  std::uint64_t init_seed = 0;
};

namespace detail {

inline Tensor he_init(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

struct ParamShapes {
  std::map<std::string, std::pair<Shape, std::size_t>> shapes;  // name -> (shape, fan_in)
  std::vector<std::string> bn_layers;                            // param_names
};

inline ParamShapes param_shapes(const NetworkSpec& spec) {
  auto shapes = validate_spec(spec);
  ParamShapes out;
  auto add = [&](const std::string& name, Shape s, std::size_t fan_in) {
    auto it = out.shapes.find(name);
    if (it != out.shapes.end()) {
      if (it->second.first != s)
        throw ShapeError("spec " + spec.name + ": aliased parameter " + name +
                         " has conflicting shapes " + shape_str(it->second.first) + " vs " +
                         shape_str(s));
      return;
    }
    out.shapes[name] = {std::move(s), fan_in};
  };
  for (const auto& l : spec.layers) {
    const std::string p = l.param_name.empty() ? l.name : l.param_name;
    switch (l.kind) {
      case LayerKind::conv2d: {
        const auto& in = shapes.at(l.inputs[0]);
        add(p + ".w", {l.out_channels, in.c, l.kernel, l.kernel}, in.c * l.kernel * l.kernel);
        add(p + ".b", {l.out_channels}, 1);
        break;
      }
      case LayerKind::deconv2d: {
        const auto& in = shapes.at(l.inputs[0]);
        add(p + ".w", {in.c, l.out_channels, l.kernel, l.kernel}, in.c * l.kernel * l.kernel);
        add(p + ".b", {l.out_channels}, 1);
        break;
      }
      case LayerKind::batchnorm2d: {
        const auto& in = shapes.at(l.inputs[0]);
        add(p + ".gamma", {in.c}, 0);
        add(p + ".beta", {in.c}, 0);
        out.bn_layers.push_back(p);
        break;
      }
      case LayerKind::fully_connected: {
        const auto& in = shapes.at(l.inputs[0]);
        add(p + ".w", {l.out_dim, in.dim}, in.dim);
        add(p + ".b", {l.out_dim}, 1);
        break;
      }
      case LayerKind::inception_lite: {
        const auto& in = shapes.at(l.inputs[0]);
        const auto& cfg = l.inception;
        add(p + ".w1", {cfg.c1x1, in.c, 1, 1}, in.c);
        add(p + ".b1", {cfg.c1x1}, 1);
        add(p + ".w3", {cfg.c3x3, in.c, 3, 3}, in.c * 9);
        add(p + ".b3", {cfg.c3x3}, 1);
        add(p + ".w5", {cfg.c5x5, in.c, 5, 5}, in.c * 25);
        add(p + ".b5", {cfg.c5x5}, 1);
        add(p + ".wp", {cfg.cpool, in.c, 1, 1}, in.c);
        add(p + ".bp", {cfg.cpool}, 1);
        break;
      }
      default:
        break;
    }
  }
  return out;
}

}  // namespace detail

/// Validates the spec, then allocates and seeds all parameters.
inline Network init_network(NetworkSpec spec, std::uint64_t seed) {
  detail::ParamShapes ps = detail::param_shapes(spec);
  Network net;
  net.spec = std::move(spec);
  net.init_seed = seed;
  for (const auto& [name, sh] : ps.shapes) {
    const auto& [shape, fan_in] = sh;
    if (name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b3") ||
        name.ends_with(".b5") || name.ends_with(".bp") || name.ends_with(".beta")) {
      net.params[name] = Tensor(shape);
    } else if (name.ends_with(".gamma")) {
      net.params[name] = Tensor(shape, 1.0);
    } else {
      net.params[name] = detail::he_init(shape, fan_in, mix_seed(seed, fnv1a64(name)));
    }
  }
  for (const auto& bn : ps.bn_layers)
    net.bn_state.emplace(bn, BatchNormState::init(net.params.at(bn + ".gamma").numel()));
  return net;
}

// --- graph execution ----------------------------------------------------------------

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::uint64_t dropout_seed = 0;
  bool trainable = false;  // mark parameter leaves requires_grad
};

struct ForwardResult {
  Var output;
  std::map<std::string, Var> nodes;       // every node's output
  std::map<std::string, Var> param_vars;  // parameter leaves (aliased once)
};

/// Executes the whole layer graph.  `bound` supplies tensors for input nodes
/// (batched rank-4 [B,C,H,W] or rank-2 [B,dim]).  Passing the same
/// `shared_params` map across calls on one tape makes Siamese roles reuse one
/// leaf per parameter, so their gradients accumulate together.
inline ForwardResult run_graph(Tape& t, Network& net,
                               const std::map<std::string, Var>& bound,
                               const ForwardOptions& opts,
                               std::map<std::string, Var>* shared_params = nullptr) {
  ForwardResult res;
  std::map<std::string, PoolResult> pools;
  auto pvar = [&](const std::string& name) -> Var {
    std::map<std::string, Var>& pmap = shared_params ? *shared_params : res.param_vars;
    auto it = pmap.find(name);
    if (it != pmap.end()) return it->second;
    Tensor p = net.params.at(name);
    p.requires_grad = opts.trainable;
    Var v = t.leaf(std::move(p));
    pmap.emplace(name, v);
    return v;
  };
  std::size_t layer_idx = 0;
  for (const auto& l : net.spec.layers) {
    ++layer_idx;
    const std::string p = l.param_name.empty() ? l.name : l.param_name;
    auto in = [&](std::size_t i = 0) { return res.nodes.at(l.inputs.at(i)); };
    Var out;
    switch (l.kind) {
      case LayerKind::input: {
        auto it = bound.find(l.name);
        if (it == bound.end())
          throw DomainError("run_graph: no tensor bound for input '" + l.name + "'");
        out = it->second;
        break;
      }
      case LayerKind::conv2d:
        out = conv2d(t, in(), pvar(p + ".w"), pvar(p + ".b"), l.stride, l.pad);
        break;
      case LayerKind::deconv2d:
        out = deconv2d(t, in(), pvar(p + ".w"), pvar(p + ".b"), l.stride, l.pad);
        break;
      case LayerKind::maxpool2d: {
        PoolResult pr = maxpool2d(t, in(), l.window, l.stride, l.pad);
        out = pr.out;
        pools.emplace(l.name, std::move(pr));
        break;
      }
      case LayerKind::maxunpool2d: {
        auto pit = pools.find(l.paired_pool);
        if (pit == pools.end())
          throw DomainError("run_graph: unpool " + l.name + " before its pool " +
                            l.paired_pool);
        out = maxunpool2d(t, in(), pit->second.indices, pit->second.input_shape);
        break;
      }
      case LayerKind::batchnorm2d:
        out = batchnorm2d(t, in(), pvar(p + ".gamma"), pvar(p + ".beta"),
                          &net.bn_state.at(p), opts.mode, l.bn_eps, l.bn_momentum);
        break;
      case LayerKind::dropout:
        out = dropout(t, in(), l.drop_p, mix_seed(opts.dropout_seed, layer_idx), opts.mode);
        break;
      case LayerKind::relu:
        out = ad::relu(t, in());
        break;
      case LayerKind::crop2d:
        out = crop2d(t, in(), l.crop_y0, l.crop_x0, l.crop_h, l.crop_w);
        break;
      case LayerKind::flatten:
        out = flatten_batch(t, in());
        break;
      case LayerKind::reshape_map: {
        const std::size_t B = t.value(in()).shape[0];
        out = ad::reshape(t, in(), {B, l.out_channels, l.crop_h, l.crop_w});
        break;
      }
      case LayerKind::fully_connected:
        out = fully_connected(t, in(), pvar(p + ".w"), pvar(p + ".b"));
        break;
      case LayerKind::l2norm: {
        const Tensor& v = t.value(in());
        out = v.rank() == 2 ? ad::l2_normalize_rows(t, in()) : ad::l2_normalize(t, in());
        break;
      }
      case LayerKind::softmax: {
        const Tensor& v = t.value(in());
        out = v.rank() == 2 ? ad::softmax_rows(t, in()) : ad::softmax(t, in());
        break;
      }
      case LayerKind::concat: {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < l.inputs.size(); ++i) parts.push_back(in(i));
        if (t.value(parts[0]).rank() == 4) {
          out = concat_channels(t, parts);
        } else {
          // batched feature concat: [B,d_i] columns side by side
          std::vector<std::size_t> dims;
          const std::size_t B = t.value(parts[0]).shape[0];
          std::size_t total = 0;
          for (Var pv : parts) {
            dims.push_back(t.value(pv).shape[1]);
            total += t.value(pv).shape[1];
          }
          Tensor cat({B, total});
          std::vector<int> ids;
          std::size_t off = 0;
          for (std::size_t k = 0; k < parts.size(); ++k) {
            const Tensor& pv = t.value(parts[k]);
            for (std::size_t b = 0; b < B; ++b)
              std::copy_n(&pv.data[b * dims[k]], dims[k], &cat.data[b * total + off]);
            off += dims[k];
            ids.push_back(parts[k].id);
          }
          out = t.record("concat_features", ids, std::move(cat),
                         [ids, dims, B, total](Tape& tp, const std::vector<double>& g,
                                               auto& flow) {
                           std::size_t off2 = 0;
                           for (std::size_t k = 0; k < ids.size(); ++k) {
                             if (tp.node(ids[k]).needs_grad) {
                               auto& f = Tape::flow_of(flow, ids[k], B * dims[k]);
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t i = 0; i < dims[k]; ++i)
                                   f[b * dims[k] + i] += g[b * total + off2 + i];
                             }
                             off2 += dims[k];
                           }
                         });
        }
        break;
      }
      case LayerKind::subtract_merge: {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < l.inputs.size(); ++i) parts.push_back(in(i));
        out = haar_split_merge(t, parts, l.pattern);
        break;
      }
      case LayerKind::inception_lite: {
        InceptionLiteParams ip{pvar(p + ".w1"), pvar(p + ".b1"), pvar(p + ".w3"),
                               pvar(p + ".b3"), pvar(p + ".w5"), pvar(p + ".b5"),
                               pvar(p + ".wp"), pvar(p + ".bp")};
        out = inception_lite(t, in(), ip);
        break;
      }
    }
    res.nodes[l.name] = out;
  }
  res.output = res.nodes.at(net.spec.output);
  return res;
}

// --- architecture builders ----------------------------------------------------------

struct CcmOverrides {
  std::size_t in_channels = 1, in_h = 48, in_w = 40;
  std::size_t n_convs = 5;
  std::size_t filters = 16;
  std::size_t kernel = 5;
  std::size_t head_hidden = 128;
  double drop_p = 0.3;
};

inline CcmOverrides ccm_full_scale() {
  CcmOverrides o;
  o.in_channels = 3;
  o.in_h = 120;
  o.in_w = 96;
  o.n_convs = 9;
  o.filters = 64;
  o.kernel = 5;
  o.head_hidden = 128;
  return o;
}

/// Siamese CCM feature branch: n unpadded convolutions (each with batchnorm,
/// dropout and ReLU except no ReLU after the last), one max-pool after conv1.
/// The full-scale geometry does not close to the published 24x12x64 branch
/// output, so a centered crop after the pool reconciles it (58x46 -> 56x44).
inline NetworkSpec ccm_branch_spec(const CcmOverrides& o) {
  NetworkSpec s;
  s.arch = "ccm_branch";
  s.name = "ccm-branch@" + std::to_string(o.in_h) + "x" + std::to_string(o.in_w);
  s.in_channels = o.in_channels;
  s.in_h = o.in_h;
  s.in_w = o.in_w;
  s.layers.push_back({.kind = LayerKind::input, .name = "roi"});
  std::string prev = "roi";
  const bool full_scale = o.in_h == 120 && o.in_w == 96 && o.n_convs == 9;
  for (std::size_t i = 1; i <= o.n_convs; ++i) {
    const std::string cn = "conv" + std::to_string(i);
    s.layers.push_back({.kind = LayerKind::conv2d,
                        .name = cn,
                        .inputs = {prev},
                        .out_channels = o.filters,
                        .kernel = o.kernel});
    s.layers.push_back(
        {.kind = LayerKind::batchnorm2d, .name = cn + "_bn", .inputs = {cn}});
    s.layers.push_back({.kind = LayerKind::dropout,
                        .name = cn + "_do",
                        .inputs = {cn + "_bn"},
                        .drop_p = o.drop_p});
    prev = cn + "_do";
    if (i < o.n_convs) {
      s.layers.push_back({.kind = LayerKind::relu, .name = cn + "_relu", .inputs = {prev}});
      prev = cn + "_relu";
    }
    if (i == 1) {
      s.layers.push_back({.kind = LayerKind::maxpool2d,
                          .name = "pool1",
                          .inputs = {prev},
                          .stride = 2,
                          .window = 2});
      prev = "pool1";
      if (full_scale) {
        // 58x46 -> 56x44 so that eight more 5x5 convolutions end at 24x12
        s.layers.push_back({.kind = LayerKind::crop2d,
                            .name = "crop_fit",
                            .inputs = {prev},
                            .crop_y0 = 1,
                            .crop_x0 = 1,
                            .crop_h = 56,
                            .crop_w = 44});
        prev = "crop_fit";
      }
    }
  }
  s.output = prev;
  return s;
}

/// Matching head over vec(t ⊙ p): two fully-connected layers and a softmax.
inline NetworkSpec ccm_head_spec(std::size_t sim_dim, std::size_t hidden) {
  NetworkSpec s;
  s.arch = "ccm_head";
  s.name = "ccm-head@" + std::to_string(sim_dim);
  s.in_dim = sim_dim;
  s.layers.push_back({.kind = LayerKind::input, .name = "sim"});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "fc1",
                      .inputs = {"sim"},
                      .out_dim = hidden});
  s.layers.push_back({.kind = LayerKind::relu, .name = "fc1_relu", .inputs = {"fc1"}});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "fc2",
                      .inputs = {"fc1_relu"},
                      .out_dim = 2});
  s.layers.push_back({.kind = LayerKind::softmax, .name = "probs", .inputs = {"fc2"}});
  s.output = "probs";
  return s;
}

struct CcmModel {
  Network branch;
  Network head;
};

inline std::size_t branch_output_dim(const Network& branch) {
  auto shapes = validate_spec(branch.spec);
  const auto& out = shapes.at(branch.spec.output);
  return out.is_map ? out.c * out.h * out.w : out.dim;
}

inline CcmModel build_ccm(const CcmOverrides& o, std::uint64_t seed) {
  CcmModel m;
  m.branch = init_network(ccm_branch_spec(o), mix_seed(seed, 1));
  m.head = init_network(ccm_head_spec(branch_output_dim(m.branch), o.head_hidden),
                        mix_seed(seed, 2));
  return m;
}

/// Similarity probabilities for a batch of feature-map pairs.
/// Returns the [B,2] (match, non-match) probabilities node.
inline Var ccm_match_on_tape(Tape& t, Var t_maps, Var p_maps, Network& head,
                             const ForwardOptions& opts) {
  if (!same_shape(t.value(t_maps), t.value(p_maps)))
    throw ShapeError("ccm_match: feature map shapes differ: " +
                     shape_str(t.value(t_maps).shape) + " vs " +
                     shape_str(t.value(p_maps).shape));
  Var sim = ad::mul(t, t_maps, p_maps);  // Hadamard similarity map
  Var vec = flatten_batch(t, sim);
  if (t.value(vec).shape[1] != head.spec.in_dim)
    throw ShapeError("ccm_match: vec(Sim) width " +
                     std::to_string(t.value(vec).shape[1]) +
                     " does not match head input " + std::to_string(head.spec.in_dim));
  auto res = run_graph(t, head, {{"sim", vec}}, opts);
  return res.output;
}

struct MatchProbability {
  double match = 0.0;
  double nonmatch = 0.0;
};

/// Value-level single-pair match: feature maps [C,H,W] (or flat) in, softmax
/// probabilities out.
inline MatchProbability ccm_match(const Tensor& t_map, const Tensor& p_map, Network& head) {
  if (t_map.shape != p_map.shape)
    throw ShapeError("ccm_match: feature map shapes differ: " + shape_str(t_map.shape) +
                     " vs " + shape_str(p_map.shape));
  Tape t;
  Tensor tb = t_map, pb = p_map;
  tb.shape = {1, t_map.numel()};
  pb.shape = {1, p_map.numel()};
  Var probs = ccm_match_on_tape(t, t.leaf(tb), t.leaf(pb), head, {});
  return {t.value(probs).data[0], t.value(probs).data[1]};
}

// --- TBE-lite ---------------------------------------------------------------------------

struct TbeOverrides {
  std::size_t in_channels = 1, in_h = 48, in_w = 40;
  std::size_t trunk_c1 = 8, trunk_c2 = 16;
  std::size_t branch_filters = 8;
  std::size_t patch_rows = 2, patch_cols = 2;  // fixed grid patches
  std::size_t embedding_dim = 64;
};

/// Trunk plus fixed-grid patch branches; branches share the trunk's first
/// convolution (shared_prefix = 1) and everything meets in one fully-
/// connected layer followed by L2 normalization.
inline NetworkSpec tbe_spec(const TbeOverrides& o) {
  NetworkSpec s;
  s.arch = "tbe";
  s.name = "tbe-lite@" + std::to_string(o.in_h) + "x" + std::to_string(o.in_w);
  s.in_channels = o.in_channels;
  s.in_h = o.in_h;
  s.in_w = o.in_w;
  s.embedding_dim = o.embedding_dim;
  s.shared_prefix = 1;
  s.layers.push_back({.kind = LayerKind::input, .name = "roi"});
  // trunk
  s.layers.push_back({.kind = LayerKind::conv2d,
                      .name = "t_conv1",
                      .param_name = "shared_conv1",
                      .inputs = {"roi"},
                      .out_channels = o.trunk_c1,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "t_relu1", .inputs = {"t_conv1"}});
  s.layers.push_back({.kind = LayerKind::maxpool2d,
                      .name = "t_pool1",
                      .inputs = {"t_relu1"},
                      .stride = 2,
                      .window = 2});
  s.layers.push_back({.kind = LayerKind::conv2d,
                      .name = "t_conv2",
                      .inputs = {"t_pool1"},
                      .out_channels = o.trunk_c2,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "t_relu2", .inputs = {"t_conv2"}});
  s.layers.push_back({.kind = LayerKind::maxpool2d,
                      .name = "t_pool2",
                      .inputs = {"t_relu2"},
                      .stride = 2,
                      .window = 2});
  s.layers.push_back({.kind = LayerKind::flatten, .name = "trunk_feat", .inputs = {"t_pool2"}});
  std::vector<std::string> feats = {"trunk_feat"};
  // patch branches, sharing conv1 weights with the trunk
  const std::size_t ph = o.patch_rows ? o.in_h / o.patch_rows : 0;
  const std::size_t pw = o.patch_cols ? o.in_w / o.patch_cols : 0;
  for (std::size_t r = 0; r < o.patch_rows; ++r)
    for (std::size_t c = 0; c < o.patch_cols; ++c) {
      const std::string b = "b" + std::to_string(r * o.patch_cols + c);
      s.layers.push_back({.kind = LayerKind::crop2d,
                          .name = b + "_patch",
                          .inputs = {"roi"},
                          .crop_y0 = r * ph,
                          .crop_x0 = c * pw,
                          .crop_h = ph,
                          .crop_w = pw});
      s.layers.push_back({.kind = LayerKind::conv2d,
                          .name = b + "_conv1",
                          .param_name = "shared_conv1",
                          .inputs = {b + "_patch"},
                          .out_channels = o.trunk_c1,
                          .kernel = 3,
                          .pad = 1});
      s.layers.push_back({.kind = LayerKind::relu, .name = b + "_relu1", .inputs = {b + "_conv1"}});
      s.layers.push_back({.kind = LayerKind::maxpool2d,
                          .name = b + "_pool1",
                          .inputs = {b + "_relu1"},
                          .stride = 2,
                          .window = 2});
      s.layers.push_back({.kind = LayerKind::conv2d,
                          .name = b + "_conv2",
                          .inputs = {b + "_pool1"},
                          .out_channels = o.branch_filters,
                          .kernel = 3,
                          .pad = 1});
      s.layers.push_back({.kind = LayerKind::relu, .name = b + "_relu2", .inputs = {b + "_conv2"}});
      s.layers.push_back({.kind = LayerKind::maxpool2d,
                          .name = b + "_pool2",
                          .inputs = {b + "_relu2"},
                          .stride = 2,
                          .window = 2});
      s.layers.push_back(
          {.kind = LayerKind::flatten, .name = b + "_feat", .inputs = {b + "_pool2"}});
      feats.push_back(b + "_feat");
    }
  std::string fc_in = feats[0];
  if (feats.size() > 1) {
    s.layers.push_back({.kind = LayerKind::concat, .name = "all_feat", .inputs = feats});
    fc_in = "all_feat";
  }
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "embed_fc",
                      .inputs = {fc_in},
                      .out_dim = o.embedding_dim});
  s.layers.push_back({.kind = LayerKind::l2norm, .name = "embedding", .inputs = {"embed_fc"}});
  s.output = "embedding";
  return s;
}

inline Network build_tbe_lite(const TbeOverrides& o, std::uint64_t seed) {
  return init_network(tbe_spec(o), seed);
}

// --- HaarNet-lite ------------------------------------------------------------------------

struct HaarnetOverrides {
  std::size_t in_channels = 1, in_h = 48, in_w = 40;
  std::size_t conv1_c = 8, conv2_c = 16;
  std::size_t embedding_dim = 64;
};

/// Shared two-conv stem; trunk = four inception-lite blocks; branches 1 and 2
/// split the stem output into two halves (two inception layers per sub-branch)
/// merged by subtraction; branch 3 splits into four quadrants (one inception
/// each) merged checker-style.  Embedding = FC over the concatenation, L2
/// normalized.
inline NetworkSpec haarnet_spec(const HaarnetOverrides& o) {
  NetworkSpec s;
  s.arch = "haarnet";
  s.name = "haarnet-lite@" + std::to_string(o.in_h) + "x" + std::to_string(o.in_w);
  s.in_channels = o.in_channels;
  s.in_h = o.in_h;
  s.in_w = o.in_w;
  s.embedding_dim = o.embedding_dim;
  s.shared_prefix = 2;
  const auto icfg = InceptionLiteCfg::split_evenly(o.conv2_c);
  s.layers.push_back({.kind = LayerKind::input, .name = "roi"});
  s.layers.push_back({.kind = LayerKind::conv2d,
                      .name = "conv1",
                      .inputs = {"roi"},
                      .out_channels = o.conv1_c,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "conv1_relu", .inputs = {"conv1"}});
  s.layers.push_back({.kind = LayerKind::maxpool2d,
                      .name = "pool1",
                      .inputs = {"conv1_relu"},
                      .stride = 2,
                      .window = 2});
  s.layers.push_back({.kind = LayerKind::conv2d,
                      .name = "conv2",
                      .inputs = {"pool1"},
                      .out_channels = o.conv2_c,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "conv2_relu", .inputs = {"conv2"}});
  s.layers.push_back({.kind = LayerKind::maxpool2d,
                      .name = "conv2_out",
                      .inputs = {"conv2_relu"},
                      .stride = 2,
                      .window = 2});
  const std::size_t H = o.in_h / 4, W = o.in_w / 4;  // stem output geometry
  // trunk: inception x2, pool, inception x2
  s.layers.push_back({.kind = LayerKind::inception_lite,
                      .name = "trunk_in1",
                      .inputs = {"conv2_out"},
                      .inception = icfg});
  s.layers.push_back({.kind = LayerKind::inception_lite,
                      .name = "trunk_in2",
                      .inputs = {"trunk_in1"},
                      .inception = icfg});
  s.layers.push_back({.kind = LayerKind::maxpool2d,
                      .name = "trunk_pool",
                      .inputs = {"trunk_in2"},
                      .stride = 2,
                      .window = 2});
  s.layers.push_back({.kind = LayerKind::inception_lite,
                      .name = "trunk_in3",
                      .inputs = {"trunk_pool"},
                      .inception = icfg});
  s.layers.push_back({.kind = LayerKind::inception_lite,
                      .name = "trunk_in4",
                      .inputs = {"trunk_in3"},
                      .inception = icfg});
  s.layers.push_back(
      {.kind = LayerKind::flatten, .name = "trunk_feat", .inputs = {"trunk_in4"}});

  auto add_crop = [&](const std::string& name, std::size_t y0, std::size_t x0,
                      std::size_t h, std::size_t w) {
    s.layers.push_back({.kind = LayerKind::crop2d,
                        .name = name,
                        .inputs = {"conv2_out"},
                        .crop_y0 = y0,
                        .crop_x0 = x0,
                        .crop_h = h,
                        .crop_w = w});
  };
  auto add_incep = [&](const std::string& name, const std::string& input) {
    s.layers.push_back({.kind = LayerKind::inception_lite,
                        .name = name,
                        .inputs = {input},
                        .inception = icfg});
  };
  // branch 1: horizontal two-rect (top/bottom halves), two inceptions each
  add_crop("b1_top", 0, 0, H / 2, W);
  add_crop("b1_bot", H / 2, 0, H / 2, W);
  add_incep("b1_top_in1", "b1_top");
  add_incep("b1_top_in2", "b1_top_in1");
  add_incep("b1_bot_in1", "b1_bot");
  add_incep("b1_bot_in2", "b1_bot_in1");
  s.layers.push_back({.kind = LayerKind::subtract_merge,
                      .name = "b1_haar",
                      .inputs = {"b1_top_in2", "b1_bot_in2"},
                      .pattern = HaarPattern::two_rect_horizontal});
  s.layers.push_back({.kind = LayerKind::flatten, .name = "b1_feat", .inputs = {"b1_haar"}});
  // branch 2: vertical two-rect (left/right halves)
  add_crop("b2_left", 0, 0, H, W / 2);
  add_crop("b2_right", 0, W / 2, H, W / 2);
  add_incep("b2_left_in1", "b2_left");
  add_incep("b2_left_in2", "b2_left_in1");
  add_incep("b2_right_in1", "b2_right");
  add_incep("b2_right_in2", "b2_right_in1");
  s.layers.push_back({.kind = LayerKind::subtract_merge,
                      .name = "b2_haar",
                      .inputs = {"b2_left_in2", "b2_right_in2"},
                      .pattern = HaarPattern::two_rect_vertical});
  s.layers.push_back({.kind = LayerKind::flatten, .name = "b2_feat", .inputs = {"b2_haar"}});
  // branch 3: four-rect checker over the quadrants (TL, TR, BR, BL)
  add_crop("b3_tl", 0, 0, H / 2, W / 2);
  add_crop("b3_tr", 0, W / 2, H / 2, W / 2);
  add_crop("b3_br", H / 2, W / 2, H / 2, W / 2);
  add_crop("b3_bl", H / 2, 0, H / 2, W / 2);
  add_incep("b3_tl_in", "b3_tl");
  add_incep("b3_tr_in", "b3_tr");
  add_incep("b3_br_in", "b3_br");
  add_incep("b3_bl_in", "b3_bl");
  s.layers.push_back({.kind = LayerKind::subtract_merge,
                      .name = "b3_haar",
                      .inputs = {"b3_tl_in", "b3_tr_in", "b3_br_in", "b3_bl_in"},
                      .pattern = HaarPattern::four_rect_checker});
  s.layers.push_back({.kind = LayerKind::flatten, .name = "b3_feat", .inputs = {"b3_haar"}});

  s.layers.push_back({.kind = LayerKind::concat,
                      .name = "all_feat",
                      .inputs = {"trunk_feat", "b1_feat", "b2_feat", "b3_feat"}});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "embed_fc",
                      .inputs = {"all_feat"},
                      .out_dim = o.embedding_dim});
  s.layers.push_back({.kind = LayerKind::l2norm, .name = "embedding", .inputs = {"embed_fc"}});
  s.output = "embedding";
  return s;
}

inline Network build_haarnet_lite(const HaarnetOverrides& o, std::uint64_t seed) {
  return init_network(haarnet_spec(o), seed);
}

// --- CFR autoencoder and classifier --------------------------------------------------------

struct CfrOverrides {
  std::size_t in_channels = 1, in_h = 48, in_w = 40;
  std::size_t c1 = 8, c2 = 16, c3 = 16;
  std::size_t fc_hidden = 128;
  std::size_t embedding_dim = 64;
  std::size_t clf_hidden = 64;
};

inline CfrOverrides cfr_full_scale() {
  CfrOverrides o;
  o.in_channels = 3;
  o.in_h = 120;
  o.in_w = 96;
  o.c1 = 32;
  o.c2 = 48;
  o.c3 = 32;
  o.fc_hidden = 384;
  o.embedding_dim = 256;
  o.clf_hidden = 128;
  return o;
}

/// Encoder (three conv+pool stages, two FC layers to the embedding) and the
/// mirrored decoder (FC, then unpool+deconv stages reusing the encoder's
/// argmax indices).  Output shape equals input shape.
inline NetworkSpec cfr_autoencoder_spec(const CfrOverrides& o) {
  if (o.in_h % 8 != 0 || o.in_w % 8 != 0)
    throw ShapeError("cfr_autoencoder_spec: geometry must be divisible by 8, got " +
                     std::to_string(o.in_h) + "x" + std::to_string(o.in_w));
  NetworkSpec s;
  s.arch = "cfr_autoencoder";
  s.name = "cfr-autoencoder@" + std::to_string(o.in_h) + "x" + std::to_string(o.in_w);
  s.in_channels = o.in_channels;
  s.in_h = o.in_h;
  s.in_w = o.in_w;
  s.embedding_dim = o.embedding_dim;
  s.layers.push_back({.kind = LayerKind::input, .name = "roi"});
  auto conv_pool = [&](const std::string& n, const std::string& in, std::size_t ch) {
    s.layers.push_back({.kind = LayerKind::conv2d,
                        .name = n,
                        .inputs = {in},
                        .out_channels = ch,
                        .kernel = 3,
                        .pad = 1});
    s.layers.push_back({.kind = LayerKind::relu, .name = n + "_relu", .inputs = {n}});
    s.layers.push_back({.kind = LayerKind::maxpool2d,
                        .name = n + "_pool",
                        .inputs = {n + "_relu"},
                        .stride = 2,
                        .window = 2});
  };
  conv_pool("enc1", "roi", o.c1);
  conv_pool("enc2", "enc1_pool", o.c2);
  conv_pool("enc3", "enc2_pool", o.c3);
  s.layers.push_back({.kind = LayerKind::flatten, .name = "enc_flat", .inputs = {"enc3_pool"}});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "enc_fc1",
                      .inputs = {"enc_flat"},
                      .out_dim = o.fc_hidden});
  s.layers.push_back({.kind = LayerKind::relu, .name = "enc_fc1_relu", .inputs = {"enc_fc1"}});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "embedding",
                      .inputs = {"enc_fc1_relu"},
                      .out_dim = o.embedding_dim});
  // decoder: FC back to the coarsest map, then unpool+deconv stages reusing
  // the encoder pool indices in reverse order
  const std::size_t h8 = o.in_h / 8, w8 = o.in_w / 8;
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "dec_fc",
                      .inputs = {"embedding"},
                      .out_dim = o.c3 * h8 * w8});
  s.layers.push_back({.kind = LayerKind::relu, .name = "dec_fc_relu", .inputs = {"dec_fc"}});
  s.layers.push_back({.kind = LayerKind::reshape_map,
                      .name = "dec_map",
                      .inputs = {"dec_fc_relu"},
                      .out_channels = o.c3,
                      .crop_h = h8,
                      .crop_w = w8});
  s.layers.push_back({.kind = LayerKind::maxunpool2d,
                      .name = "dec_up3",
                      .inputs = {"dec_map"},
                      .paired_pool = "enc3_pool"});
  s.layers.push_back({.kind = LayerKind::deconv2d,
                      .name = "dec1",
                      .inputs = {"dec_up3"},
                      .out_channels = o.c2,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "dec1_relu", .inputs = {"dec1"}});
  s.layers.push_back({.kind = LayerKind::maxunpool2d,
                      .name = "dec_up2",
                      .inputs = {"dec1_relu"},
                      .paired_pool = "enc2_pool"});
  s.layers.push_back({.kind = LayerKind::deconv2d,
                      .name = "dec2",
                      .inputs = {"dec_up2"},
                      .out_channels = o.c1,
                      .kernel = 3,
                      .pad = 1});
  s.layers.push_back({.kind = LayerKind::relu, .name = "dec2_relu", .inputs = {"dec2"}});
  s.layers.push_back({.kind = LayerKind::maxunpool2d,
                      .name = "dec_up1",
                      .inputs = {"dec2_relu"},
                      .paired_pool = "enc1_pool"});
  s.layers.push_back({.kind = LayerKind::deconv2d,
                      .name = "recon",
                      .inputs = {"dec_up1"},
                      .out_channels = o.in_channels,
                      .kernel = 3,
                      .pad = 1});
  s.output = "recon";
  return s;
}

/// Pairwise still/video matching head over concatenated embeddings.
inline NetworkSpec cfr_classifier_spec(const CfrOverrides& o) {
  NetworkSpec s;
  s.arch = "cfr_classifier";
  s.name = "cfr-classifier@" + std::to_string(o.embedding_dim);
  s.in_dim = 2 * o.embedding_dim;
  s.layers.push_back({.kind = LayerKind::input, .name = "pair"});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "fc1",
                      .inputs = {"pair"},
                      .out_dim = o.clf_hidden});
  s.layers.push_back({.kind = LayerKind::relu, .name = "fc1_relu", .inputs = {"fc1"}});
  s.layers.push_back({.kind = LayerKind::fully_connected,
                      .name = "fc2",
                      .inputs = {"fc1_relu"},
                      .out_dim = 2});
  s.layers.push_back({.kind = LayerKind::softmax, .name = "probs", .inputs = {"fc2"}});
  s.output = "probs";
  return s;
}

struct CfrModel {
  Network autoencoder;
  Network classifier;
};

inline CfrModel build_cfr(const CfrOverrides& o, std::uint64_t seed) {
  CfrModel m;
  m.autoencoder = init_network(cfr_autoencoder_spec(o), mix_seed(seed, 11));
  m.classifier = init_network(cfr_classifier_spec(o), mix_seed(seed, 12));
  return m;
}

// --- forward helpers --------------------------------------------------------------------

namespace detail {

inline Var bind_roi_batch(Tape& t, const Network& net, const std::vector<Tensor>& rois) {
  if (rois.empty()) throw DomainError("forward: empty ROI batch");
  const Shape expect{net.spec.in_channels, net.spec.in_h, net.spec.in_w};
  const std::size_t B = rois.size();
  Tensor batch({B, net.spec.in_channels, net.spec.in_h, net.spec.in_w});
  for (std::size_t i = 0; i < B; ++i) {
    if (rois[i].shape != expect)
      throw ShapeError("forward: ROI shape " + shape_str(rois[i].shape) +
                       " does not match spec geometry " + shape_str(expect));
    std::copy(rois[i].data.begin(), rois[i].data.end(),
              batch.data.begin() + static_cast<long>(i * rois[i].numel()));
  }
  return t.leaf(std::move(batch));
}

inline const char* entry_node(const Network& net) {
  for (const auto& l : net.spec.layers)
    if (l.kind == LayerKind::input) return l.name.c_str();
  throw DomainError("forward: spec has no input node");
}

}  // namespace detail

/// Eval-mode embedding of one ROI.  For the CCM branch this is the flattened
/// feature map (not unit-norm); for embedding networks it is the L2-normalized
/// representation; for the CFR autoencoder, the encoder output.
inline Tensor forward_embed(Network& net, const Tensor& roi) {
  if (net.spec.in_h == 0)
    throw DomainError("forward_embed: network '" + net.spec.name +
                      "' does not consume ROIs");
  Tape t;
  Var in = detail::bind_roi_batch(t, net, {roi});
  auto res = run_graph(t, net, {{detail::entry_node(net), in}}, {});
  const std::string node =
      net.spec.arch == "ccm_branch" ? net.spec.output : "embedding";
  const Tensor& out = t.value(res.nodes.at(node));
  Tensor flat;
  flat.shape = {out.numel()};
  flat.data = out.data;
  return flat;
}

/// Eval-mode autoencoder pass: (embedding, reconstruction).
inline std::pair<Tensor, Tensor> forward_reconstruct(Network& net, const Tensor& roi) {
  if (net.spec.arch != "cfr_autoencoder")
    throw DomainError("forward_reconstruct: network '" + net.spec.name +
                      "' is not an autoencoder");
  Tape t;
  Var in = detail::bind_roi_batch(t, net, {roi});
  auto res = run_graph(t, net, {{detail::entry_node(net), in}}, {});
  const Tensor& emb = t.value(res.nodes.at("embedding"));
  const Tensor& rec = t.value(res.output);
  Tensor embedding;
  embedding.shape = {emb.numel()};
  embedding.data = emb.data;
  Tensor recon;
  recon.shape = {rec.shape[1], rec.shape[2], rec.shape[3]};
  recon.data = rec.data;
  return {std::move(embedding), std::move(recon)};
}

// --- complexity accounting ----------------------------------------------------------------

/// Counting conventions (documented, applied uniformly):
///   layers     — parameterized nodes (conv2d, deconv2d, fully_connected,
///                inception_lite) plus pool and merge nodes (maxpool2d,
///                maxunpool2d, concat, subtract_merge).  Activations,
///                normalization, dropout, crops and reshapes do not count.
///   operations — multiply-accumulates of one eval-mode forward pass:
///                conv k^2*Cin*Cout*Ho*Wo; deconv k^2*Cin*Cout*H*W (input
///                positions); FC in*out; batchnorm (eval, fused affine) and
///                l2norm one MAC per element; everything else free.
///   parameters — exact sum of parameter tensor lengths.
struct ComplexityReport {
  std::size_t n_operations = 0;
  std::size_t n_parameters = 0;
  std::size_t n_layers = 0;
};

inline ComplexityReport complexity_of(const Network& net) {
  auto shapes = validate_spec(net.spec);
  ComplexityReport rep;
  std::map<std::string, bool> counted_params;
  for (const auto& l : net.spec.layers) {
    const std::string p = l.param_name.empty() ? l.name : l.param_name;
    auto out = shapes.at(l.name);
    auto in = l.inputs.empty() ? detail::SymbolicShape{} : shapes.at(l.inputs[0]);
    const bool first_use = !counted_params.count(p);
    switch (l.kind) {
      case LayerKind::conv2d:
        rep.n_layers += 1;
        rep.n_operations += l.kernel * l.kernel * in.c * out.c * out.h * out.w;
        if (first_use) {
          rep.n_parameters += net.params.at(p + ".w").numel() + net.params.at(p + ".b").numel();
          counted_params[p] = true;
        }
        break;
      case LayerKind::deconv2d:
        rep.n_layers += 1;
        rep.n_operations += l.kernel * l.kernel * in.c * out.c * in.h * in.w;
        if (first_use) {
          rep.n_parameters += net.params.at(p + ".w").numel() + net.params.at(p + ".b").numel();
          counted_params[p] = true;
        }
        break;
      case LayerKind::fully_connected:
        rep.n_layers += 1;
        rep.n_operations += in.dim * out.dim;
        if (first_use) {
          rep.n_parameters += net.params.at(p + ".w").numel() + net.params.at(p + ".b").numel();
          counted_params[p] = true;
        }
        break;
      case LayerKind::inception_lite: {
        rep.n_layers += 1;
        const auto& cfg = l.inception;
        rep.n_operations += 1 * 1 * in.c * cfg.c1x1 * out.h * out.w;
        rep.n_operations += 3 * 3 * in.c * cfg.c3x3 * out.h * out.w;
        rep.n_operations += 5 * 5 * in.c * cfg.c5x5 * out.h * out.w;
        rep.n_operations += 1 * 1 * in.c * cfg.cpool * out.h * out.w;
        if (first_use) {
          for (const char* suffix : {".w1", ".b1", ".w3", ".b3", ".w5", ".b5", ".wp", ".bp"})
            rep.n_parameters += net.params.at(p + suffix).numel();
          counted_params[p] = true;
        }
        break;
      }
      case LayerKind::batchnorm2d:
        rep.n_operations += out.c * out.h * out.w;  // fused eval-mode affine
        if (first_use) {
          rep.n_parameters +=
              net.params.at(p + ".gamma").numel() + net.params.at(p + ".beta").numel();
          counted_params[p] = true;
        }
        break;
      case LayerKind::l2norm:
        rep.n_operations += out.is_map ? out.c * out.h * out.w : out.dim;
        break;
      case LayerKind::maxpool2d:
      case LayerKind::maxunpool2d:
      case LayerKind::concat:
      case LayerKind::subtract_merge:
        rep.n_layers += 1;
        break;
      default:
        break;
    }
  }
  return rep;
}

/// Sanity invariant: the accountant's parameter total equals the parameter
/// map's total size exactly.
inline std::size_t total_parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const auto& [name, t] : net.params) n += t.numel();
  return n;
}

// --- spec text serialization ---------------------------------------------------------------

inline std::string NetworkSpec_layer_line(const LayerParams& l) {
  std::ostringstream os;
  os << layer_kind_name(l.kind) << " name=" << l.name;
  if (!l.param_name.empty() && l.param_name != l.name) os << " params=" << l.param_name;
  if (!l.inputs.empty()) {
    os << " in=";
    for (std::size_t i = 0; i < l.inputs.size(); ++i) os << (i ? "," : "") << l.inputs[i];
  }
  if (l.out_channels) os << " out_channels=" << l.out_channels;
  if (l.kernel) os << " kernel=" << l.kernel;
  if (l.stride != 1) os << " stride=" << l.stride;
  if (l.pad) os << " pad=" << l.pad;
  if (l.window) os << " window=" << l.window;
  if (l.out_dim) os << " out_dim=" << l.out_dim;
  if (l.drop_p != 0.0) os << " drop_p=" << l.drop_p;
  if (l.kind == LayerKind::batchnorm2d) os << " eps=" << l.bn_eps << " momentum=" << l.bn_momentum;
  if (l.kind == LayerKind::inception_lite)
    os << " paths=" << l.inception.c1x1 << "," << l.inception.c3x3 << "," << l.inception.c5x5
       << "," << l.inception.cpool;
  if (l.kind == LayerKind::crop2d || l.kind == LayerKind::reshape_map)
    os << " crop=" << l.crop_y0 << "," << l.crop_x0 << "," << l.crop_h << "," << l.crop_w;
  if (l.kind == LayerKind::subtract_merge)
    os << " pattern="
       << (l.pattern == HaarPattern::two_rect_horizontal   ? "two_rect_horizontal"
           : l.pattern == HaarPattern::two_rect_vertical   ? "two_rect_vertical"
                                                           : "four_rect_checker");
  if (!l.paired_pool.empty()) os << " pool=" << l.paired_pool;
  return os.str();
}

inline std::string NetworkSpec::canonical_text() const {
  std::ostringstream os;
  os << "spec.name = " << name << "\n";
  os << "spec.arch = " << arch << "\n";
  os << "spec.in_channels = " << in_channels << "\n";
  os << "spec.in_h = " << in_h << "\n";
  os << "spec.in_w = " << in_w << "\n";
  os << "spec.in_dim = " << in_dim << "\n";
  os << "spec.embedding_dim = " << embedding_dim << "\n";
  os << "spec.shared_prefix = " << shared_prefix << "\n";
  os << "spec.output = " << output << "\n";
  for (std::size_t i = 0; i < layers.size(); ++i)
    os << "layer." << i << " = " << NetworkSpec_layer_line(layers[i]) << "\n";
  return os.str();
}

// --- checkpoints ------------------------------------------------------------------------------
//
// Layout: `STVCKPT v1` line, `spec_hash <hex>` line, the spec text
// (line-count prefixed), a parameter manifest, then TENSOR v1 records —
// parameters in manifest order, followed by batchnorm running statistics.

inline void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  const std::string spec_text = net.spec.canonical_text();
  std::size_t spec_lines = 0;
  for (char c : spec_text) spec_lines += c == '\n' ? 1 : 0;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(net.spec.hash()));
  f << "STVCKPT v1\n";
  f << "spec_hash " << hex << "\n";
  f << "spec_lines " << spec_lines << "\n";
  f << spec_text;
  f << "params " << net.params.size() << " bn_states " << net.bn_state.size() << "\n";
  for (const auto& [name, t] : net.params) {
    f << name;
    for (std::size_t d : t.shape) f << ' ' << d;
    f << "\n";
  }
  for (const auto& [name, t] : net.params) write_tensor(f, t);
  for (const auto& [name, st] : net.bn_state) {
    f << "bnstate " << name << "\n";
    write_tensor(f, st.running_mean);
    write_tensor(f, st.running_var);
  }
  if (!f) throw IoError("save_checkpoint: write failure on " + path);
}

namespace detail {

inline std::map<std::string, std::string> parse_kv_tokens(std::istringstream& ls) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (ls >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw IoError("spec text: malformed token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline LayerKind layer_kind_from(const std::string& s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::maxunpool2d,
                      LayerKind::deconv2d, LayerKind::batchnorm2d, LayerKind::dropout,
                      LayerKind::fully_connected, LayerKind::relu, LayerKind::l2norm,
                      LayerKind::softmax, LayerKind::concat, LayerKind::subtract_merge,
                      LayerKind::inception_lite, LayerKind::input, LayerKind::crop2d,
                      LayerKind::flatten, LayerKind::reshape_map})
    if (s == layer_kind_name(k)) return k;
  throw IoError("spec text: unknown layer kind '" + s + "'");
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace detail

inline NetworkSpec spec_from_text(const std::string& text) {
  NetworkSpec spec;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw IoError("spec text: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "spec.name") spec.name = value;
    else if (key == "spec.arch") spec.arch = value;
    else if (key == "spec.in_channels") spec.in_channels = std::stoull(value);
    else if (key == "spec.in_h") spec.in_h = std::stoull(value);
    else if (key == "spec.in_w") spec.in_w = std::stoull(value);
    else if (key == "spec.in_dim") spec.in_dim = std::stoull(value);
    else if (key == "spec.embedding_dim") spec.embedding_dim = std::stoull(value);
    else if (key == "spec.shared_prefix") spec.shared_prefix = std::stoull(value);
    else if (key == "spec.output") spec.output = value;
    else if (key.rfind("layer.", 0) == 0) {
      std::istringstream ls(value);
      std::string kind_s;
      ls >> kind_s;
      LayerParams l;
      l.kind = detail::layer_kind_from(kind_s);
      auto kv = detail::parse_kv_tokens(ls);
      if (kv.count("name")) l.name = kv["name"];
      l.param_name = kv.count("params") ? kv["params"] : "";
      if (kv.count("in")) l.inputs = detail::split_commas(kv["in"]);
      if (kv.count("out_channels")) l.out_channels = std::stoull(kv["out_channels"]);
      if (kv.count("kernel")) l.kernel = std::stoull(kv["kernel"]);
      if (kv.count("stride")) l.stride = std::stoull(kv["stride"]);
      if (kv.count("pad")) l.pad = std::stoull(kv["pad"]);
      if (kv.count("window")) l.window = std::stoull(kv["window"]);
      if (kv.count("out_dim")) l.out_dim = std::stoull(kv["out_dim"]);
      if (kv.count("drop_p")) l.drop_p = std::stod(kv["drop_p"]);
      if (kv.count("eps")) l.bn_eps = std::stod(kv["eps"]);
      if (kv.count("momentum")) l.bn_momentum = std::stod(kv["momentum"]);
      if (kv.count("paths")) {
        auto parts = detail::split_commas(kv["paths"]);
        if (parts.size() != 4) throw IoError("spec text: inception paths need 4 widths");
        l.inception = {std::stoull(parts[0]), std::stoull(parts[1]), std::stoull(parts[2]),
                       std::stoull(parts[3])};
      }
      if (kv.count("crop")) {
        auto parts = detail::split_commas(kv["crop"]);
        if (parts.size() != 4) throw IoError("spec text: crop needs 4 values");
        l.crop_y0 = std::stoull(parts[0]);
        l.crop_x0 = std::stoull(parts[1]);
        l.crop_h = std::stoull(parts[2]);
        l.crop_w = std::stoull(parts[3]);
      }
      if (kv.count("pattern")) {
        const std::string& p = kv["pattern"];
        l.pattern = p == "two_rect_horizontal" ? HaarPattern::two_rect_horizontal
                    : p == "two_rect_vertical" ? HaarPattern::two_rect_vertical
                                               : HaarPattern::four_rect_checker;
      }
      if (kv.count("pool")) l.paired_pool = kv["pool"];
      spec.layers.push_back(std::move(l));
    } else {
      throw IoError("spec text: unknown key '" + key + "'");
    }
  }
  return spec;
}

inline void save_spec(const NetworkSpec& spec, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("save_spec: cannot open " + path);
  f << spec.canonical_text();
}

inline NetworkSpec load_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_spec: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return spec_from_text(ss.str());
}

/// Rebuilds the network from the embedded spec text.  When `expect` is given,
/// its hash must match the stored one; parameters load bit-exactly.
inline Network load_checkpoint(const std::string& path, const NetworkSpec* expect = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw CheckpointCorruptError("load_checkpoint: empty file");
  if (line.rfind("STVCKPT", 0) != 0)
    throw CheckpointCorruptError("load_checkpoint: bad magic '" + line + "'");
  if (line != "STVCKPT v1")
    throw CheckpointVersionError("load_checkpoint: unsupported version '" + line + "'");
  if (!std::getline(f, line) || line.rfind("spec_hash ", 0) != 0)
    throw CheckpointCorruptError("load_checkpoint: missing spec_hash");
  const std::string stored_hash = line.substr(10);
  if (!std::getline(f, line) || line.rfind("spec_lines ", 0) != 0)
    throw CheckpointCorruptError("load_checkpoint: missing spec_lines");
  const std::size_t spec_lines = std::stoull(line.substr(11));
  std::string spec_text;
  for (std::size_t i = 0; i < spec_lines; ++i) {
    if (!std::getline(f, line))
      throw CheckpointCorruptError("load_checkpoint: truncated spec text");
    spec_text += line;
    spec_text += '\n';
  }
  NetworkSpec spec = spec_from_text(spec_text);
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(spec.hash()));
  if (stored_hash != hex)
    throw CheckpointCorruptError("load_checkpoint: stored spec does not match its hash");
  if (expect) {
    char ehex[32];
    std::snprintf(ehex, sizeof(ehex), "%016llx",
                  static_cast<unsigned long long>(expect->hash()));
    if (stored_hash != ehex)
      throw CheckpointSpecError("load_checkpoint: checkpoint spec hash " + stored_hash +
                                " does not match expected " + ehex);
  }
  if (!std::getline(f, line) || line.rfind("params ", 0) != 0)
    throw CheckpointCorruptError("load_checkpoint: missing params manifest");
  std::size_t n_params = 0, n_bn = 0;
  {
    std::istringstream hs(line);
    std::string w1, w3;
    hs >> w1 >> n_params >> w3 >> n_bn;
    if (!hs || w1 != "params" || w3 != "bn_states")
      throw CheckpointCorruptError("load_checkpoint: malformed manifest header '" + line + "'");
  }
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < n_params; ++i) {
    if (!std::getline(f, line))
      throw CheckpointCorruptError("load_checkpoint: truncated manifest");
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    std::size_t d;
    while (ls >> d) shape.push_back(d);
    manifest.emplace_back(name, shape);
  }
  Network net;
  net.spec = std::move(spec);
  try {
    for (const auto& [name, shape] : manifest) {
      Tensor t = read_tensor(f);
      if (t.shape != shape)
        throw CheckpointCorruptError("load_checkpoint: tensor " + name +
                                     " shape mismatch against manifest");
      net.params[name] = std::move(t);
    }
    for (std::size_t i = 0; i < n_bn; ++i) {
      if (!std::getline(f, line) || line.rfind("bnstate ", 0) != 0)
        throw CheckpointCorruptError("load_checkpoint: missing bnstate record");
      const std::string name = line.substr(8);
      BatchNormState st;
      st.running_mean = read_tensor(f);
      st.running_var = read_tensor(f);
      net.bn_state[name] = std::move(st);
    }
  } catch (const IoError& e) {
    throw CheckpointCorruptError(std::string("load_checkpoint: ") + e.what());
  }
  return net;
}

}  // namespace stv::nn
