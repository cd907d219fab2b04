#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "conceptsplit/errors.hpp"
#include "conceptsplit/numerics.hpp"

namespace csplit {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. Data is physically double; in fast mode every
// stored value is rounded through float32 (see numerics.hpp). Copies share
// the underlying buffer; operations never mutate their inputs. Mutation via
// data() is reserved for leaf tensors between tape scopes (optimizer steps,
// initialization).
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor from_data(const Shape& s, std::vector<double> v);
    static Tensor scalar(double v);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const;

    double* data();
    const double* data() const;
    double at(int64_t i) const;
    double item() const;  // requires size() == 1

    Tensor clone() const;  // deep copy, grad metadata cleared
    Tensor reshaped_view(const Shape& s) const;  // shares data, off-tape

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    // Tape linkage; node_id is meaningful only for the tape whose id matches.
    // Only op outputs are bound through storage (they are thread-local at
    // creation); leaves are registered in the tape's own map so shared
    // parameters can participate in several tapes concurrently.
    uint64_t tape_id() const;
    int node_id() const;
    void bind_node(uint64_t tape, int node) const;
    const void* storage_key() const;

  private:
    struct Storage {
        std::vector<double> v;
        bool requires_grad = false;
        uint64_t tape_id = 0;
        int node = -1;
    };
    std::shared_ptr<Storage> s_;
    Shape shape_;
};

enum class OpKind {
    leaf,
    matmul,
    add,
    scalar_mul,
    elementwise_mul,
    row_softmax,
    log,
    sum,
    reshape,
    transpose,
    layer_norm,
    gelu,
    relu,
    gaussian_blur_2d,
    broadcast_add,
    slice,
    reciprocal,
    scale_by,
};

const char* op_name(OpKind k);

// Record of primitive operations in execution (= topological) order. Inputs
// of a record always precede it; backward sweeps the records exactly once in
// reverse. Construction and backward are single-threaded per tape.
class Tape {
  public:
    struct Record {
        OpKind kind;
        std::vector<int> in;       // input node ids, -1 for untracked constants
        std::vector<Tensor> saved; // activations needed by backward
        Shape shape;               // output shape
        double p0 = 0.0;           // scalar op parameter
        std::vector<int> ip;       // int op parameters (layout per op)
    };

    Tape();
    uint64_t id() const { return id_; }
    int size() const { return static_cast<int>(records_.size()); }
    const Record& record(int i) const { return records_[static_cast<size_t>(i)]; }

    int node_of(const Tensor& t) const;  // -1 when not tracked on this tape
    int ensure_leaf(const Tensor& t);
    int push(Record r);
    const std::unordered_map<const void*, int>& leaves() const { return leaf_map_; }

  private:
    uint64_t id_;
    std::vector<Record> records_;
    std::unordered_map<const void*, int> leaf_map_;
};

// RAII activation of a tape on the current thread. Ops record themselves on
// the innermost active tape when any input is tracked or requires grad.
class TapeScope {
  public:
    explicit TapeScope(Tape& t);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
};

// Suspends recording (used internally by backward; handy in tests).
class TapeSuspend {
  public:
    TapeSuspend();
    ~TapeSuspend();
    TapeSuspend(const TapeSuspend&) = delete;
    TapeSuspend& operator=(const TapeSuspend&) = delete;
};

Tape* active_tape();

// Result of backward: node id -> gradient tensor. Tensors that never reached
// the loss get a zero gradient of their own shape.
class GradientMap {
  public:
    GradientMap(uint64_t tape_id, std::vector<Tensor> by_node,
                std::unordered_map<const void*, int> leaf_map);
    Tensor of(const Tensor& t) const;
    bool tracked(const Tensor& t) const;

  private:
    int node_of(const Tensor& t) const;
    uint64_t tape_id_;
    std::vector<Tensor> by_node_;
    std::unordered_map<const void*, int> leaf_map_;
};

GradientMap backward(const Tape& tape, const Tensor& loss);

// ---- primitives ----------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double s);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor row_softmax(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);  // -> shape {1}
Tensor reshape(const Tensor& x, const Shape& s);
Tensor transpose(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
// Separable Gaussian blur on an (H, W) map. Boundaries use symmetric folding
// (out-of-bounds taps reflect back in), which keeps the operator doubly
// stochastic: total mass is preserved and a uniform map stays uniform. The
// operator is self-adjoint, so backward applies the same blur.
Tensor gaussian_blur_2d(const Tensor& x, int ksize = 3, double sigma = 1.0);
Tensor broadcast_add(const Tensor& x, const Tensor& row);
Tensor slice(const Tensor& x, int dim, int begin, int end);
Tensor reciprocal(const Tensor& x);
Tensor scale_by(const Tensor& x, const Tensor& s);  // s has size 1

// convenience compositions (not primitives)
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mean(const Tensor& x);

// ---- gradient checking ----------------------------------------------------
struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t argmax = -1;
    bool has_nan = false;
    int64_t nan_index = -1;
    bool ok(double tol) const { return !has_nan && max_rel_err < tol; }
};

// Central-difference check of d f(x) / dx against the tape gradient.
// f must be scalar-valued; requires verify mode. The finite-difference side
// uses only forward evaluations and is independent of the backward pass.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h = 1e-5);

}  // namespace csplit
