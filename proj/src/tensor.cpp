#include "conceptsplit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace csplit {

// ---- numeric mode ----------------------------------------------------------

namespace {
NumericMode g_mode = NumericMode::verify;
}  // namespace

NumericMode numeric_mode() { return g_mode; }
void set_numeric_mode(NumericMode m) { g_mode = m; }

double canon(double v) {
    return g_mode == NumericMode::fast ? static_cast<double>(static_cast<float>(v)) : v;
}

namespace {

void canon_buffer(std::vector<double>& v) {
    if (g_mode != NumericMode::fast) return;
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace

// ---- shape helpers ---------------------------------------------------------

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s) {
    Tensor t;
    t.shape_ = s;
    t.s_ = std::make_shared<Storage>();
    t.s_->v.assign(static_cast<size_t>(shape_size(s)), 0.0);
    return t;
}

Tensor Tensor::full(const Shape& s, double v) {
    Tensor t = zeros(s);
    std::fill(t.s_->v.begin(), t.s_->v.end(), canon(v));
    return t;
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v) {
    if (static_cast<int64_t>(v.size()) != shape_size(s))
        shape_fail("from_data", "got " + std::to_string(v.size()) +
                                    " values for shape " + shape_str(s));
    Tensor t;
    t.shape_ = s;
    t.s_ = std::make_shared<Storage>();
    t.s_->v = std::move(v);
    canon_buffer(t.s_->v);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

int64_t Tensor::size() const { return s_ ? static_cast<int64_t>(s_->v.size()) : 0; }

double* Tensor::data() { return s_->v.data(); }
const double* Tensor::data() const { return s_->v.data(); }

double Tensor::at(int64_t i) const { return s_->v[static_cast<size_t>(i)]; }

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item(): tensor has " + std::to_string(size()) +
                            " elements, expected 1");
    return s_->v[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.s_ = std::make_shared<Storage>();
    t.s_->v = s_->v;
    return t;
}

Tensor Tensor::reshaped_view(const Shape& s) const {
    if (shape_size(s) != size())
        shape_fail("reshaped_view", shape_str(shape_) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape_ = s;
    return t;
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    s_->requires_grad = v;
    return *this;
}

uint64_t Tensor::tape_id() const { return s_ ? s_->tape_id : 0; }
int Tensor::node_id() const { return s_ ? s_->node : -1; }

void Tensor::bind_node(uint64_t tape, int node) const {
    s_->tape_id = tape;
    s_->node = node;
}

const void* Tensor::storage_key() const { return s_.get(); }

// ---- tape ------------------------------------------------------------------

namespace {
std::atomic<uint64_t> g_tape_counter{1};
thread_local std::vector<Tape*> g_tape_stack;
}  // namespace

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int Tape::node_of(const Tensor& t) const {
    if (t.tape_id() == id_ && t.node_id() >= 0) return t.node_id();
    auto it = leaf_map_.find(t.storage_key());
    return it == leaf_map_.end() ? -1 : it->second;
}

int Tape::ensure_leaf(const Tensor& t) {
    const int existing = node_of(t);
    if (existing >= 0) return existing;
    Record r;
    r.kind = OpKind::leaf;
    r.shape = t.shape();
    const int node = push(std::move(r));
    // shared leaves (model weights) must not be mutated: track per tape
    leaf_map_[t.storage_key()] = node;
    return node;
}

int Tape::push(Record r) {
    records_.push_back(std::move(r));
    return static_cast<int>(records_.size()) - 1;
}

TapeScope::TapeScope(Tape& t) { g_tape_stack.push_back(&t); }
TapeScope::~TapeScope() { g_tape_stack.pop_back(); }

TapeSuspend::TapeSuspend() { g_tape_stack.push_back(nullptr); }
TapeSuspend::~TapeSuspend() { g_tape_stack.pop_back(); }

Tape* active_tape() {
    return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::scalar_mul: return "scalar-mul";
        case OpKind::elementwise_mul: return "elementwise-mul";
        case OpKind::row_softmax: return "row-softmax";
        case OpKind::log: return "log";
        case OpKind::sum: return "sum";
        case OpKind::reshape: return "reshape";
        case OpKind::transpose: return "transpose";
        case OpKind::layer_norm: return "layer-norm";
        case OpKind::gelu: return "gelu";
        case OpKind::relu: return "relu";
        case OpKind::gaussian_blur_2d: return "gaussian-blur-2d";
        case OpKind::broadcast_add: return "broadcast-add";
        case OpKind::slice: return "slice";
        case OpKind::reciprocal: return "reciprocal";
        case OpKind::scale_by: return "scale-by";
    }
    return "?";
}

namespace {

bool wants_tape(const Tensor& t) {
    Tape* tp = active_tape();
    if (!tp) return false;
    return t.requires_grad() || tp->node_of(t) >= 0;
}

// Records an op whose inputs are `ins`; constants keep node id -1. Returns
// true when the output tensor was bound to the active tape.
bool record_op(OpKind kind, const std::vector<Tensor>& ins,
               std::vector<Tensor> saved, const Tensor& out, double p0 = 0.0,
               std::vector<int> ip = {}) {
    Tape* tp = active_tape();
    if (!tp) return false;
    bool any = false;
    for (const Tensor& t : ins) any = any || wants_tape(t);
    if (!any) return false;
    Tape::Record r;
    r.kind = kind;
    for (const Tensor& t : ins)
        r.in.push_back(wants_tape(t) ? tp->ensure_leaf(t) : -1);
    r.saved = std::move(saved);
    r.shape = out.shape();
    r.p0 = p0;
    r.ip = std::move(ip);
    out.bind_node(tp->id(), tp->push(std::move(r)));
    return true;
}

// ---- raw kernels -----------------------------------------------------------

void matmul_kernel(const double* a, const double* b, double* c, int m, int k,
                   int n) {
    if (g_mode == NumericMode::fast) {
        // float32 arithmetic with float accumulation; deterministic ikj order
        thread_local std::vector<float> af, bf, cf;
        af.assign(a, a + static_cast<size_t>(m) * k);
        bf.assign(b, b + static_cast<size_t>(k) * n);
        cf.assign(static_cast<size_t>(m) * n, 0.0f);
        for (int i = 0; i < m; ++i) {
            const float* arow = af.data() + static_cast<size_t>(i) * k;
            float* crow = cf.data() + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const float aik = arow[kk];
                const float* brow = bf.data() + static_cast<size_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
        for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i)
            c[i] = static_cast<double>(cf[static_cast<size_t>(i)]);
        return;
    }
    std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const double* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

std::vector<double> gaussian_taps(int ksize, double sigma) {
    std::vector<double> taps(static_cast<size_t>(ksize));
    const int r = ksize / 2;
    double total = 0.0;
    for (int d = -r; d <= r; ++d) {
        double w = std::exp(-0.5 * (d * d) / (sigma * sigma));
        taps[static_cast<size_t>(d + r)] = w;
        total += w;
    }
    for (double& w : taps) w /= total;
    return taps;
}

// Half-sample symmetric fold of index i into [0, n).
int fold_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

void blur_pass_rows(const double* in, double* out, int h, int w,
                    const std::vector<double>& taps) {
    const int r = static_cast<int>(taps.size()) / 2;
    for (int y = 0; y < h; ++y) {
        const double* row = in + static_cast<size_t>(y) * w;
        double* orow = out + static_cast<size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -r; d <= r; ++d)
                acc += taps[static_cast<size_t>(d + r)] * row[fold_index(x + d, w)];
            orow[x] = acc;
        }
    }
}

void blur_pass_cols(const double* in, double* out, int h, int w,
                    const std::vector<double>& taps) {
    const int r = static_cast<int>(taps.size()) / 2;
    for (int y = 0; y < h; ++y) {
        double* orow = out + static_cast<size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -r; d <= r; ++d)
                acc += taps[static_cast<size_t>(d + r)] *
                       in[static_cast<size_t>(fold_index(y + d, h)) * w + x];
            orow[x] = acc;
        }
    }
}

double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

double gelu_grad(double x) {
    const double phi_cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double phi_pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return phi_cdf + x * phi_pdf;
}

Tensor make_out(const Shape& s, std::vector<double> v) {
    return Tensor::from_data(s, std::move(v));
}

}  // namespace

// ---- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        shape_fail("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    matmul_kernel(a.data(), b.data(), out.data(), m, k, n);
    Tensor c = make_out({m, n}, std::move(out));
    record_op(OpKind::matmul, {a, b}, {a, b}, c);
    return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(a.size()));
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i];
    canon_buffer(out);
    Tensor c = make_out(a.shape(), std::move(out));
    record_op(OpKind::add, {a, b}, {}, c);
    return c;
}

Tensor scalar_mul(const Tensor& x, double s) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = px[i] * s;
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::scalar_mul, {x}, {}, c, s);
    return c;
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail("elementwise-mul",
                   shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(a.size()));
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i];
    canon_buffer(out);
    Tensor c = make_out(a.shape(), std::move(out));
    record_op(OpKind::elementwise_mul, {a, b}, {a, b}, c);
    return c;
}

Tensor row_softmax(const Tensor& x) {
    if (x.ndim() != 2) shape_fail("row-softmax", shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int r = 0; r < rows; ++r) {
        const double* row = px + static_cast<size_t>(r) * cols;
        double* orow = out.data() + static_cast<size_t>(r) * cols;
        double mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) {
            orow[c] = std::exp(row[c] - mx);
            denom += orow[c];
        }
        for (int c = 0; c < cols; ++c) orow[c] /= denom;
    }
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::row_softmax, {x}, {c}, c);
    return c;
}

Tensor log(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = std::log(px[i]);
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::log, {x}, {x}, c);
    return c;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) acc += px[i];
    Tensor c = Tensor::scalar(acc);
    std::vector<int> ip(x.shape().begin(), x.shape().end());
    record_op(OpKind::sum, {x}, {}, c, 0.0, std::move(ip));
    return c;
}

Tensor reshape(const Tensor& x, const Shape& s) {
    if (shape_size(s) != x.size())
        shape_fail("reshape", shape_str(x.shape()) + " -> " + shape_str(s));
    Tensor c = make_out(s, std::vector<double>(x.data(), x.data() + x.size()));
    std::vector<int> ip(x.shape().begin(), x.shape().end());
    record_op(OpKind::reshape, {x}, {}, c, 0.0, std::move(ip));
    return c;
}

Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) shape_fail("transpose", shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<size_t>(c) * rows + r] = px[static_cast<size_t>(r) * cols + c];
    Tensor c = make_out({cols, rows}, std::move(out));
    record_op(OpKind::transpose, {x}, {}, c);
    return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    if (x.ndim() != 2) shape_fail("layer-norm", shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    if (gamma.size() != cols || beta.size() != cols)
        shape_fail("layer-norm", "affine params " + shape_str(gamma.shape()) +
                                     "/" + shape_str(beta.shape()) + " for " +
                                     shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> xhat(static_cast<size_t>(x.size()));
    std::vector<double> inv_std(static_cast<size_t>(rows));
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (int r = 0; r < rows; ++r) {
        const double* row = px + static_cast<size_t>(r) * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += row[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int c = 0; c < cols; ++c) {
            const size_t idx = static_cast<size_t>(r) * cols + c;
            xhat[idx] = (row[c] - mu) * is;
            out[idx] = xhat[idx] * pg[c] + pb[c];
        }
    }
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    Tensor xhat_t = make_out(x.shape(), std::move(xhat));
    Tensor is_t = make_out({rows}, std::move(inv_std));
    record_op(OpKind::layer_norm, {x, gamma, beta}, {xhat_t, is_t, gamma}, c, eps);
    return c;
}

Tensor gelu(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = gelu_fwd(px[i]);
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::gelu, {x}, {x}, c);
    return c;
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    // subgradient at 0 is 0, so the forward keeps x > 0 strictly
    for (int64_t i = 0; i < x.size(); ++i)
        out[static_cast<size_t>(i)] = px[i] > 0.0 ? px[i] : 0.0;
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::relu, {x}, {x}, c);
    return c;
}

Tensor gaussian_blur_2d(const Tensor& x, int ksize, double sigma) {
    if (x.ndim() != 2) shape_fail("gaussian-blur-2d", shape_str(x.shape()));
    if (ksize < 1 || ksize % 2 == 0)
        throw ContractError("gaussian-blur-2d: kernel size must be odd, got " +
                            std::to_string(ksize));
    const int h = x.dim(0), w = x.dim(1);
    const std::vector<double> taps = gaussian_taps(ksize, sigma);
    std::vector<double> tmp(static_cast<size_t>(x.size()));
    std::vector<double> out(static_cast<size_t>(x.size()));
    blur_pass_rows(x.data(), tmp.data(), h, w, taps);
    blur_pass_cols(tmp.data(), out.data(), h, w, taps);
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::gaussian_blur_2d, {x}, {}, c, sigma, {ksize});
    return c;
}

Tensor broadcast_add(const Tensor& x, const Tensor& row) {
    if (x.ndim() != 2 || row.size() != x.dim(1))
        shape_fail("broadcast-add",
                   shape_str(x.shape()) + " + " + shape_str(row.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    const double* pr = row.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const size_t idx = static_cast<size_t>(r) * cols + c;
            out[idx] = px[idx] + pr[c];
        }
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::broadcast_add, {x, row}, {}, c, 0.0, {rows, cols});
    return c;
}

Tensor slice(const Tensor& x, int dim, int begin, int end) {
    if (x.ndim() != 2 || dim < 0 || dim > 1)
        shape_fail("slice", shape_str(x.shape()) + " dim " + std::to_string(dim));
    const int rows = x.dim(0), cols = x.dim(1);
    const int extent = dim == 0 ? rows : cols;
    if (begin < 0 || end > extent || begin >= end)
        throw ContractError("slice: range [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") out of bounds for " +
                            shape_str(x.shape()));
    const int orows = dim == 0 ? end - begin : rows;
    const int ocols = dim == 1 ? end - begin : cols;
    std::vector<double> out(static_cast<size_t>(orows) * ocols);
    const double* px = x.data();
    for (int r = 0; r < orows; ++r)
        for (int c = 0; c < ocols; ++c) {
            const int sr = dim == 0 ? r + begin : r;
            const int sc = dim == 1 ? c + begin : c;
            out[static_cast<size_t>(r) * ocols + c] = px[static_cast<size_t>(sr) * cols + sc];
        }
    Tensor c = make_out({orows, ocols}, std::move(out));
    record_op(OpKind::slice, {x}, {}, c, 0.0, {dim, begin, end, rows, cols});
    return c;
}

Tensor reciprocal(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = 1.0 / px[i];
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::reciprocal, {x}, {c}, c);
    return c;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.size() != 1)
        shape_fail("scale-by", "scale has shape " + shape_str(s.shape()));
    const double sv = s.at(0);
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* px = x.data();
    for (int64_t i = 0; i < x.size(); ++i) out[static_cast<size_t>(i)] = px[i] * sv;
    canon_buffer(out);
    Tensor c = make_out(x.shape(), std::move(out));
    record_op(OpKind::scale_by, {x, s}, {x, s}, c);
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scalar_mul(b, -1.0)); }

Tensor mean(const Tensor& x) {
    return scalar_mul(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- backward --------------------------------------------------------------

GradientMap::GradientMap(uint64_t tape_id, std::vector<Tensor> by_node,
                         std::unordered_map<const void*, int> leaf_map)
    : tape_id_(tape_id), by_node_(std::move(by_node)),
      leaf_map_(std::move(leaf_map)) {}

int GradientMap::node_of(const Tensor& t) const {
    if (t.tape_id() == tape_id_ && t.node_id() >= 0) return t.node_id();
    auto it = leaf_map_.find(t.storage_key());
    return it == leaf_map_.end() ? -1 : it->second;
}

bool GradientMap::tracked(const Tensor& t) const { return node_of(t) >= 0; }

Tensor GradientMap::of(const Tensor& t) const {
    const int node = node_of(t);
    if (node >= 0) {
        const Tensor& g = by_node_[static_cast<size_t>(node)];
        if (g.defined()) return g;
    }
    return Tensor::zeros(t.shape());
}

namespace {

void accumulate(std::vector<Tensor>& grads, int node, const Tensor& delta) {
    if (node < 0) return;
    Tensor& slot = grads[static_cast<size_t>(node)];
    slot = slot.defined() ? add(slot, delta) : delta;
}

Shape shape_from_ip(const std::vector<int>& ip, size_t begin, size_t count) {
    return Shape(ip.begin() + static_cast<long>(begin),
                 ip.begin() + static_cast<long>(begin + count));
}

}  // namespace

GradientMap backward(const Tape& tape, const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss has shape " + shape_str(loss.shape()) +
                            ", expected a scalar");
    const int loss_node = tape.node_of(loss);
    if (loss_node < 0)
        throw ContractError("backward: loss is not recorded on this tape");

    TapeSuspend off;  // gradient math must not re-record
    const int n = tape.size();
    std::vector<Tensor> grads(static_cast<size_t>(n));

    grads[static_cast<size_t>(loss_node)] = Tensor::full({1}, 1.0);

    for (int i = loss_node; i >= 0; --i) {
        const Tape::Record& r = tape.record(i);
        const Tensor& g = grads[static_cast<size_t>(i)];
        if (!g.defined() || r.kind == OpKind::leaf) continue;
        switch (r.kind) {
            case OpKind::matmul: {
                const Tensor& a = r.saved[0];
                const Tensor& b = r.saved[1];
                if (r.in[0] >= 0) accumulate(grads, r.in[0], matmul(g, transpose(b)));
                if (r.in[1] >= 0) accumulate(grads, r.in[1], matmul(transpose(a), g));
                break;
            }
            case OpKind::add:
                accumulate(grads, r.in[0], g);
                accumulate(grads, r.in[1], g);
                break;
            case OpKind::scalar_mul:
                accumulate(grads, r.in[0], scalar_mul(g, r.p0));
                break;
            case OpKind::elementwise_mul:
                if (r.in[0] >= 0) accumulate(grads, r.in[0], elementwise_mul(g, r.saved[1]));
                if (r.in[1] >= 0) accumulate(grads, r.in[1], elementwise_mul(g, r.saved[0]));
                break;
            case OpKind::row_softmax: {
                const Tensor& s = r.saved[0];
                const int rows = s.dim(0), cols = s.dim(1);
                std::vector<double> dx(static_cast<size_t>(s.size()));
                const double* ps = s.data();
                const double* pg = g.data();
                for (int rr = 0; rr < rows; ++rr) {
                    const size_t off = static_cast<size_t>(rr) * cols;
                    double dot = 0.0;
                    for (int c = 0; c < cols; ++c) dot += pg[off + c] * ps[off + c];
                    for (int c = 0; c < cols; ++c)
                        dx[off + c] = ps[off + c] * (pg[off + c] - dot);
                }
                canon_buffer(dx);
                accumulate(grads, r.in[0], make_out(s.shape(), std::move(dx)));
                break;
            }
            case OpKind::log:
                accumulate(grads, r.in[0], elementwise_mul(g, reciprocal(r.saved[0])));
                break;
            case OpKind::sum: {
                Shape in_shape = shape_from_ip(r.ip, 0, r.ip.size());
                accumulate(grads, r.in[0], Tensor::full(in_shape, g.item()));
                break;
            }
            case OpKind::reshape: {
                Shape in_shape = shape_from_ip(r.ip, 0, r.ip.size());
                accumulate(grads, r.in[0], reshape(g, in_shape));
                break;
            }
            case OpKind::transpose:
                accumulate(grads, r.in[0], transpose(g));
                break;
            case OpKind::layer_norm: {
                const Tensor& xhat = r.saved[0];
                const Tensor& inv_std = r.saved[1];
                const Tensor& gamma = r.saved[2];
                const int rows = xhat.dim(0), cols = xhat.dim(1);
                const double* pxh = xhat.data();
                const double* pis = inv_std.data();
                const double* pgm = gamma.data();
                const double* pg = g.data();
                if (r.in[0] >= 0) {
                    std::vector<double> dx(static_cast<size_t>(xhat.size()));
                    for (int rr = 0; rr < rows; ++rr) {
                        const size_t off = static_cast<size_t>(rr) * cols;
                        double m1 = 0.0, m2 = 0.0;
                        for (int c = 0; c < cols; ++c) {
                            const double dxh = pg[off + c] * pgm[c];
                            m1 += dxh;
                            m2 += dxh * pxh[off + c];
                        }
                        m1 /= cols;
                        m2 /= cols;
                        for (int c = 0; c < cols; ++c) {
                            const double dxh = pg[off + c] * pgm[c];
                            dx[off + c] = pis[rr] * (dxh - m1 - pxh[off + c] * m2);
                        }
                    }
                    canon_buffer(dx);
                    accumulate(grads, r.in[0], make_out(xhat.shape(), std::move(dx)));
                }
                if (r.in[1] >= 0 || r.in[2] >= 0) {
                    std::vector<double> dgm(static_cast<size_t>(cols), 0.0);
                    std::vector<double> dbt(static_cast<size_t>(cols), 0.0);
                    for (int rr = 0; rr < rows; ++rr) {
                        const size_t off = static_cast<size_t>(rr) * cols;
                        for (int c = 0; c < cols; ++c) {
                            dgm[static_cast<size_t>(c)] += pg[off + c] * pxh[off + c];
                            dbt[static_cast<size_t>(c)] += pg[off + c];
                        }
                    }
                    canon_buffer(dgm);
                    canon_buffer(dbt);
                    if (r.in[1] >= 0)
                        accumulate(grads, r.in[1], make_out({cols}, std::move(dgm)));
                    if (r.in[2] >= 0)
                        accumulate(grads, r.in[2], make_out({cols}, std::move(dbt)));
                }
                break;
            }
            case OpKind::gelu: {
                const Tensor& x = r.saved[0];
                std::vector<double> dx(static_cast<size_t>(x.size()));
                const double* px = x.data();
                const double* pg = g.data();
                for (int64_t j = 0; j < x.size(); ++j)
                    dx[static_cast<size_t>(j)] = pg[j] * gelu_grad(px[j]);
                canon_buffer(dx);
                accumulate(grads, r.in[0], make_out(x.shape(), std::move(dx)));
                break;
            }
            case OpKind::relu: {
                const Tensor& x = r.saved[0];
                std::vector<double> dx(static_cast<size_t>(x.size()));
                const double* px = x.data();
                const double* pg = g.data();
                for (int64_t j = 0; j < x.size(); ++j)
                    dx[static_cast<size_t>(j)] = px[j] > 0.0 ? pg[j] : 0.0;
                accumulate(grads, r.in[0], make_out(x.shape(), std::move(dx)));
                break;
            }
            case OpKind::gaussian_blur_2d:
                // symmetric-fold blur is self-adjoint
                accumulate(grads, r.in[0], gaussian_blur_2d(g, r.ip[0], r.p0));
                break;
            case OpKind::broadcast_add: {
                const int rows = r.ip[0], cols = r.ip[1];
                accumulate(grads, r.in[0], g);
                if (r.in[1] >= 0) {
                    std::vector<double> db(static_cast<size_t>(cols), 0.0);
                    const double* pg = g.data();
                    for (int rr = 0; rr < rows; ++rr)
                        for (int c = 0; c < cols; ++c)
                            db[static_cast<size_t>(c)] += pg[static_cast<size_t>(rr) * cols + c];
                    canon_buffer(db);
                    accumulate(grads, r.in[1], make_out({cols}, std::move(db)));
                }
                break;
            }
            case OpKind::slice: {
                const int dim = r.ip[0], begin = r.ip[1];
                const int rows = r.ip[3], cols = r.ip[4];
                std::vector<double> dx(static_cast<size_t>(rows) * cols, 0.0);
                const double* pg = g.data();
                const int orows = r.shape[0], ocols = r.shape[1];
                for (int rr = 0; rr < orows; ++rr)
                    for (int c = 0; c < ocols; ++c) {
                        const int sr = dim == 0 ? rr + begin : rr;
                        const int sc = dim == 1 ? c + begin : c;
                        dx[static_cast<size_t>(sr) * cols + sc] =
                            pg[static_cast<size_t>(rr) * ocols + c];
                    }
                accumulate(grads, r.in[0], make_out({rows, cols}, std::move(dx)));
                break;
            }
            case OpKind::reciprocal: {
                const Tensor& y = r.saved[0];
                accumulate(grads, r.in[0],
                           scalar_mul(elementwise_mul(g, elementwise_mul(y, y)), -1.0));
                break;
            }
            case OpKind::scale_by: {
                const Tensor& x = r.saved[0];
                const Tensor& s = r.saved[1];
                if (r.in[0] >= 0) accumulate(grads, r.in[0], scalar_mul(g, s.at(0)));
                if (r.in[1] >= 0) accumulate(grads, r.in[1], sum(elementwise_mul(g, x)));
                break;
            }
            case OpKind::leaf:
                break;
        }
    }
    return GradientMap(tape.id(), std::move(grads), tape.leaves());
}

// ---- gradient checking ------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h) {
    if (numeric_mode() != NumericMode::verify)
        throw ContractError("grad_check requires verify (64-bit) mode");

    Tensor xg = x.clone();
    xg.set_requires_grad(true);
    Tape tape;
    Tensor analytic;
    {
        TapeScope scope(tape);
        Tensor loss = f(xg);
        if (loss.size() != 1)
            throw ContractError("grad_check: f must be scalar-valued, got " +
                                shape_str(loss.shape()));
        analytic = backward(tape, loss).of(xg);
    }

    GradCheckResult res;
    TapeSuspend off;
    for (int64_t i = 0; i < x.size(); ++i) {
        Tensor xp = x.clone();
        Tensor xm = x.clone();
        xp.data()[i] += h;
        xm.data()[i] -= h;
        const double fp = f(xp).item();
        const double fm = f(xm).item();
        const double cd = (fp - fm) / (2.0 * h);
        const double an = analytic.at(i);
        if (!std::isfinite(cd) || !std::isfinite(an)) {
            if (!res.has_nan) {
                res.has_nan = true;
                res.nan_index = i;  // first offending element
            }
            continue;
        }
        const double rel = std::abs(an - cd) / (std::abs(an) + std::abs(cd) + 1e-12);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.argmax = i;
        }
    }
    return res;
}

}  // namespace csplit
