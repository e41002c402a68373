#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cifre {

// Error taxonomy. Everything thrown by this library derives from Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ShapeError : public Error { public: using Error::Error; };     // dim/size mismatches
class SpecError : public Error { public: using Error::Error; };     // invalid layer/block specs
class ContractError : public Error { public: using Error::Error; }; // API contract violations
class DataError : public Error { public: using Error::Error; };     // bad runtime data (labels etc.)
class FormatError : public Error { public: using Error::Error; };   // file format problems
class ConfigError : public Error { public: using Error::Error; };   // bad configuration

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dim");
    if (s.size() > 4) throw ShapeError("tensor rank > 4 not supported: " + shape_str(s));
    for (int d : s)
        if (d < 1) throw ShapeError("tensor dims must be >= 1: " + shape_str(s));
}

template <class T>
struct TensorData {
    Shape shape;
    std::vector<T> v;  // values, row-major
    std::vector<T> g;  // gradient, empty until backward touches it
    bool requires_grad = false;
};

// Shared-storage tensor handle. Copies alias the same buffer; clone() deep-copies.
// Activations use NCHW order.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : p_(std::make_shared<TensorData<T>>()) {
        check_shape_valid(shape);
        p_->shape = std::move(shape);
        p_->v.assign(static_cast<size_t>(shape_numel(p_->shape)), fill);
    }

    Tensor(Shape shape, std::vector<T> buf) : p_(std::make_shared<TensorData<T>>()) {
        check_shape_valid(shape);
        const long long n = shape_numel(shape);
        if (static_cast<long long>(buf.size()) != n)
            throw ShapeError("buffer length " + std::to_string(buf.size()) +
                             " does not match shape " + shape_str(shape) + " (numel " +
                             std::to_string(n) + ")");
        p_->shape = std::move(shape);
        p_->v = std::move(buf);
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
    static Tensor full(Shape s, T value) { return Tensor(std::move(s), value); }
    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    long long numel() const { return static_cast<long long>(p_->v.size()); }

    T* data() { return p_->v.data(); }
    const T* data() const { return p_->v.data(); }
    std::vector<T>& values() { return p_->v; }
    const std::vector<T>& values() const { return p_->v; }

    T& operator[](long long i) { return p_->v[static_cast<size_t>(i)]; }
    const T& operator[](long long i) const { return p_->v[static_cast<size_t>(i)]; }

    // Multi-index access, mainly for tests and small code paths.
    T& at(std::initializer_list<int> idx) { return p_->v[static_cast<size_t>(offset(idx))]; }
    const T& at(std::initializer_list<int> idx) const {
        return p_->v[static_cast<size_t>(offset(idx))];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        p_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !p_->g.empty(); }
    // Gradient buffer, allocated as zeros on first use.
    std::vector<T>& grad_buffer() {
        if (p_->g.empty()) p_->g.assign(p_->v.size(), T(0));
        return p_->g;
    }
    const std::vector<T>& grad() const {
        static const std::vector<T> empty;
        return p_->g.empty() ? empty : p_->g;
    }
    void zero_grad() {
        if (!p_->g.empty()) std::fill(p_->g.begin(), p_->g.end(), T(0));
    }
    void drop_grad() { p_->g.clear(); }

    // Identity of the underlying storage (used by the tape).
    const std::shared_ptr<TensorData<T>>& node() const { return p_; }

    Tensor clone() const {
        Tensor out(p_->shape, p_->v);
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> buf(p_->v.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<U>(p_->v[i]);
        return Tensor<U>(p_->shape, std::move(buf));
    }

private:
    long long offset(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != rank())
            throw ShapeError("index rank mismatch for shape " + shape_str(p_->shape));
        long long off = 0;
        int i = 0;
        for (int ix : idx) {
            off = off * p_->shape[static_cast<size_t>(i)] + ix;
            ++i;
        }
        return off;
    }

    std::shared_ptr<TensorData<T>> p_;
};

// Reverse-mode tape. Operations append themselves in execution order, so the list is
// topologically sorted by construction; backward() replays it once in reverse.
// A tape must not be shared across concurrent backward calls.
template <class T>
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void replay_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <class T>
inline std::vector<T>& grad_of(const std::shared_ptr<TensorData<T>>& d) {
    if (d->g.empty()) d->g.assign(d->v.size(), T(0));
    return d->g;
}

#if defined(CIFRE_FINITE_CHECKS) || !defined(NDEBUG)
constexpr bool kFiniteChecks = true;
#else
constexpr bool kFiniteChecks = false;
#endif

template <class T>
inline void assert_finite(const Tensor<T>& t, const char* where) {
    if constexpr (kFiniteChecks) {
        const T* p = t.data();
        const long long n = t.numel();
        for (long long i = 0; i < n; ++i) {
            if (!std::isfinite(static_cast<double>(p[i])))
                throw DataError(std::string("non-finite value produced by ") + where +
                                " at flat index " + std::to_string(i));
        }
    } else {
        (void)t;
        (void)where;
    }
}

}  // namespace detail

// Backpropagate from a scalar loss through every operation recorded on the tape.
// Gradients sum across fan-out; leaves not reached by the loss keep zero gradients.
template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss of shape [1]");
    detail::grad_of(loss.node())[0] += T(1);
    tape.replay_backward();
}

// Central-difference gradient of a scalar function, (f(x+h e_i) - f(x-h e_i)) / 2h.
// This is the verification oracle for every backward rule in the library; f must be
// deterministic and must not record onto any tape.
template <class T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           T step) {
    if (!(step > T(0))) throw ContractError("finite_diff_grad: step must be > 0");
    Tensor<T> probe = x.clone();
    Tensor<T> out(x.shape());
    for (long long i = 0; i < x.numel(); ++i) {
        const T saved = probe[i];
        probe[i] = saved + step;
        const T fp = f(probe);
        probe[i] = saved - step;
        const T fm = f(probe);
        probe[i] = saved;
        out[i] = (fp - fm) / (T(2) * step);
    }
    return out;
}

namespace detail {

// Broadcast classification for binary elementwise ops. "vec" is the [N,C,1,1] or
// [1,C,1,1] side paired with a full [N,C,H,W] tensor.
enum class BinKind { same, b_vec, a_vec };

inline BinKind classify_binary(const Shape& a, const Shape& b) {
    if (a == b) return BinKind::same;
    auto vec_onto = [](const Shape& v, const Shape& full) {
        return full.size() == 4 && v.size() == 4 && v[1] == full[1] && v[2] == 1 && v[3] == 1 &&
               (v[0] == full[0] || v[0] == 1);
    };
    if (vec_onto(b, a)) return BinKind::b_vec;
    if (vec_onto(a, b)) return BinKind::a_vec;
    throw ShapeError("binary op shapes incompatible: " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// y = a + b. Shapes must match, or one side may be [N,C,1,1] / [1,C,1,1] against
// the other's [N,C,H,W] (per-channel bias pattern).
template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    using detail::BinKind;
    const BinKind kind = detail::classify_binary(a.shape(), b.shape());
    const Tensor<T>& full = (kind == BinKind::a_vec) ? b : a;
    const Tensor<T>& vec = (kind == BinKind::a_vec) ? a : b;

    Tensor<T> y(full.shape());
    if (kind == BinKind::same) {
        const T* pa = a.data();
        const T* pb = b.data();
        T* py = y.data();
        const long long n = y.numel();
        for (long long i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    } else {
        const int N = full.dim(0), C = full.dim(1);
        const long long hw = static_cast<long long>(full.dim(2)) * full.dim(3);
        const bool per_n = vec.dim(0) == N;
        const T* pf = full.data();
        const T* pv = vec.data();
        T* py = y.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T v = pv[(per_n ? n * C : 0) + c];
                const long long base = (static_cast<long long>(n) * C + c) * hw;
                for (long long i = 0; i < hw; ++i) py[base + i] = pf[base + i] + v;
            }
    }
    detail::assert_finite(y, "add");

    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn, kind]() {
            if (yn->g.empty()) return;
            const T* dy = yn->g.data();
            const long long n = static_cast<long long>(yn->g.size());
            auto accum_same = [&](const std::shared_ptr<TensorData<T>>& d) {
                auto& g = detail::grad_of(d);
                for (long long i = 0; i < n; ++i) g[i] += dy[i];
            };
            auto accum_vec = [&](const std::shared_ptr<TensorData<T>>& d) {
                auto& g = detail::grad_of(d);
                const int N = yn->shape[0], C = yn->shape[1];
                const long long hw = static_cast<long long>(yn->shape[2]) * yn->shape[3];
                const bool per_n = d->shape[0] == N;
                for (int nn = 0; nn < N; ++nn)
                    for (int c = 0; c < C; ++c) {
                        const long long base = (static_cast<long long>(nn) * C + c) * hw;
                        T s = T(0);
                        for (long long i = 0; i < hw; ++i) s += dy[base + i];
                        g[(per_n ? nn * C : 0) + c] += s;
                    }
            };
            if (kind == BinKind::same) {
                accum_same(an);
                accum_same(bn);
            } else if (kind == BinKind::b_vec) {
                accum_same(an);
                accum_vec(bn);
            } else {
                accum_vec(an);
                accum_same(bn);
            }
        });
    }
    return y;
}

// y = a * b elementwise, same broadcast rules as add().
template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    using detail::BinKind;
    const BinKind kind = detail::classify_binary(a.shape(), b.shape());
    const Tensor<T>& full = (kind == BinKind::a_vec) ? b : a;
    const Tensor<T>& vec = (kind == BinKind::a_vec) ? a : b;

    Tensor<T> y(full.shape());
    if (kind == BinKind::same) {
        const T* pa = a.data();
        const T* pb = b.data();
        T* py = y.data();
        const long long n = y.numel();
        for (long long i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    } else {
        const int N = full.dim(0), C = full.dim(1);
        const long long hw = static_cast<long long>(full.dim(2)) * full.dim(3);
        const bool per_n = vec.dim(0) == N;
        const T* pf = full.data();
        const T* pv = vec.data();
        T* py = y.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T v = pv[(per_n ? n * C : 0) + c];
                const long long base = (static_cast<long long>(n) * C + c) * hw;
                for (long long i = 0; i < hw; ++i) py[base + i] = pf[base + i] * v;
            }
    }
    detail::assert_finite(y, "mul");

    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn, kind]() {
            if (yn->g.empty()) return;
            const T* dy = yn->g.data();
            if (kind == BinKind::same) {
                auto& ga = detail::grad_of(an);
                auto& gb = detail::grad_of(bn);
                const long long n = static_cast<long long>(yn->g.size());
                for (long long i = 0; i < n; ++i) {
                    ga[i] += dy[i] * bn->v[i];
                    gb[i] += dy[i] * an->v[i];
                }
                return;
            }
            const auto& fulln = (kind == BinKind::a_vec) ? bn : an;
            const auto& vecn = (kind == BinKind::a_vec) ? an : bn;
            auto& gf = detail::grad_of(fulln);
            auto& gv = detail::grad_of(vecn);
            const int N = yn->shape[0], C = yn->shape[1];
            const long long hw = static_cast<long long>(yn->shape[2]) * yn->shape[3];
            const bool per_n = vecn->shape[0] == N;
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c) {
                    const long long vi = (per_n ? nn * C : 0) + c;
                    const T v = vecn->v[vi];
                    const long long base = (static_cast<long long>(nn) * C + c) * hw;
                    T s = T(0);
                    for (long long i = 0; i < hw; ++i) {
                        gf[base + i] += dy[base + i] * v;
                        s += dy[base + i] * fulln->v[base + i];
                    }
                    gv[vi] += s;
                }
        });
    }
    return y;
}

// Concatenate rank-4 tensors along the channel dim.
template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: need at least one input");
    const Shape& s0 = parts[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels expects rank-4 inputs");
    int ctotal = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: mismatched input " + shape_str(s) + " vs " +
                             shape_str(s0));
        ctotal += s[1];
    }
    const int N = s0[0], H = s0[2], W = s0[3];
    const long long hw = static_cast<long long>(H) * W;
    Tensor<T> y(Shape{N, ctotal, H, W});
    T* py = y.data();
    for (int n = 0; n < N; ++n) {
        long long co = 0;
        for (const auto& p : parts) {
            const int c = p.dim(1);
            const T* src = p.data() + static_cast<long long>(n) * c * hw;
            T* dst = py + (static_cast<long long>(n) * ctotal + co) * hw;
            std::copy(src, src + static_cast<long long>(c) * hw, dst);
            co += c;
        }
    }

    if (tape) {
        std::vector<std::shared_ptr<TensorData<T>>> ins;
        ins.reserve(parts.size());
        for (const auto& p : parts) ins.push_back(p.node());
        auto yn = y.node();
        tape->record([ins, yn]() {
            if (yn->g.empty()) return;
            const int N = yn->shape[0], ctotal = yn->shape[1];
            const long long hw = static_cast<long long>(yn->shape[2]) * yn->shape[3];
            const T* dy = yn->g.data();
            for (int n = 0; n < N; ++n) {
                long long co = 0;
                for (const auto& in : ins) {
                    const int c = in->shape[1];
                    auto& g = detail::grad_of(in);
                    const T* src = dy + (static_cast<long long>(n) * ctotal + co) * hw;
                    T* dst = g.data() + static_cast<long long>(n) * c * hw;
                    const long long count = static_cast<long long>(c) * hw;
                    for (long long i = 0; i < count; ++i) dst[i] += src[i];
                    co += c;
                }
            }
        });
    }
    return y;
}

// y = x[:, c0:c1, :, :].
template <class T>
Tensor<T> slice_channels(Tape<T>* tape, const Tensor<T>& x, int c0, int c1) {
    if (x.rank() != 4) throw ShapeError("slice_channels expects rank-4 input");
    const int C = x.dim(1);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw ShapeError("slice_channels: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for C=" + std::to_string(C));
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3), Cs = c1 - c0;
    const long long hw = static_cast<long long>(H) * W;
    Tensor<T> y(Shape{N, Cs, H, W});
    for (int n = 0; n < N; ++n) {
        const T* src = x.data() + (static_cast<long long>(n) * C + c0) * hw;
        T* dst = y.data() + static_cast<long long>(n) * Cs * hw;
        std::copy(src, src + static_cast<long long>(Cs) * hw, dst);
    }

    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, c0]() {
            if (yn->g.empty()) return;
            auto& gx = detail::grad_of(xn);
            const int N = yn->shape[0], Cs = yn->shape[1], C = xn->shape[1];
            const long long hw = static_cast<long long>(yn->shape[2]) * yn->shape[3];
            const T* dy = yn->g.data();
            for (int n = 0; n < N; ++n) {
                const T* src = dy + static_cast<long long>(n) * Cs * hw;
                T* dst = gx.data() + (static_cast<long long>(n) * C + c0) * hw;
                const long long count = static_cast<long long>(Cs) * hw;
                for (long long i = 0; i < count; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

// Same elements, new shape (copying; numel must match).
template <class T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
    check_shape_valid(shape);
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor<T> y(std::move(shape), x.values());
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn]() {
            if (yn->g.empty()) return;
            auto& gx = detail::grad_of(xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += yn->g[i];
        });
    }
    return y;
}

// y = c * x for a constant c.
template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
    Tensor<T> y(x.shape());
    const T* px = x.data();
    T* py = y.data();
    const long long n = x.numel();
    for (long long i = 0; i < n; ++i) py[i] = c * px[i];
    detail::assert_finite(y, "scale");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, c]() {
            if (yn->g.empty()) return;
            auto& gx = detail::grad_of(xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += c * yn->g[i];
        });
    }
    return y;
}

// Sum of all elements, as a [1] tensor.
template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
    T s = T(0);
    const T* px = x.data();
    const long long n = x.numel();
    for (long long i = 0; i < n; ++i) s += px[i];
    Tensor<T> y = Tensor<T>::scalar(s);
    detail::assert_finite(y, "sum");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn]() {
            if (yn->g.empty()) return;
            const T dy = yn->g[0];
            auto& gx = detail::grad_of(xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += dy;
        });
    }
    return y;
}

}  // namespace cifre
