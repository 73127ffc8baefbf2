#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "msa/tape.hpp"
#include "msa/tensor.hpp"

namespace msa {

enum class NegativeStrategy { kHardest, kSumAll };

// Tracks proximity to non-smooth points (hinge kinks, hardest-negative ties)
// encountered while evaluating a loss; grad_check installs one per probe and
// skips probes that land too close to a kink. Thread-confined.
class KinkWatch {
 public:
  KinkWatch();
  ~KinkWatch();
  KinkWatch(const KinkWatch&) = delete;
  KinkWatch& operator=(const KinkWatch&) = delete;

  double min_distance() const { return min_distance_; }

  static void report(double distance);

 private:
  KinkWatch* prev_;
  double min_distance_ = std::numeric_limits<double>::infinity();
};

// ---- elementwise / linear algebra ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 x rank-2
Tensor transpose(const Tensor& m);                // rank-2
Tensor reshape(const Tensor& a, Shape shape);     // same element count
Tensor tanh_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);  // -> scalar
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // N×d + d
Tensor softmax_rows(const Tensor& m, double temperature);
Tensor detach(const Tensor& a);

// ---- image encoder kernels --------------------------------------------------

// x: b×c_in×h×w, w: c_out×c_in, bias: optional c_out. 1×1 channel mixing.
Tensor channel_linear(const Tensor& x, const Tensor& w, const Tensor* bias);
Tensor avg_pool2(const Tensor& x);       // b×c×h×w -> b×c×h/2×w/2
Tensor global_avg_pool(const Tensor& x); // b×c×h×w -> b×c

// ---- text encoder kernels ---------------------------------------------------

// table: rows×d; ids: b*p entries, each < rows. Result b×p×d.
Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids,
                        std::size_t b, std::size_t p);
Tensor add_posenc(const Tensor& e, const Tensor& pos);  // b×p×d + p×d

// Masked multi-head softmax self-attention over each row's tokens.
// q,k,v: b×p×d; mask: b*p bytes (1 = valid key). All query positions are
// computed; padded keys are excluded.
Tensor token_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<std::uint8_t>& mask,
                               std::size_t heads, double scaling);

Tensor mask_rows(const Tensor& local, const std::vector<std::uint8_t>& mask);
Tensor masked_mean_rows(const Tensor& local, const std::vector<std::uint8_t>& mask);

// ---- pairwise (in-batch, image×text) attention kernels ----------------------

// q: a×d image queries; k,v: b×p×d per-text token projections; mask: b*p.
// Result a×b×d: for every (image j, text k) a sigmoid-gated aggregation of
// text k's valid tokens. Padded tokens receive gate exactly 0. When
// gate_dump is non-null it is filled with the gate values, laid out
// (image j, text k, head h, token t).
Tensor pairwise_gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                const std::vector<std::uint8_t>& mask,
                                double temperature, std::size_t heads,
                                std::vector<double>* gate_dump = nullptr);

// Softmax attention of image query j over the sequence [image j ; text k's
// valid tokens], returning the image-position output per (j, k). Standard
// 1/sqrt(head_dim) scaling.
Tensor pairwise_softmax_attention(const Tensor& q_img, const Tensor& k_img,
                                  const Tensor& v_img, const Tensor& k_txt,
                                  const Tensor& v_txt,
                                  const std::vector<std::uint8_t>& mask,
                                  std::size_t heads);

Tensor add_cls_broadcast(const Tensor& agg, const Tensor& cls);  // a×b×d + b×d
Tensor pairwise_cosine(const Tensor& v, const Tensor& u);        // a×d, a×b×d -> a×b
Tensor cosine_matrix(const Tensor& a, const Tensor& b);          // N×d, M×d -> N×M

// ---- loss kernels -----------------------------------------------------------

// mean_j [logsumexp_u(m_ju / tau) - m_jj / tau] over rows of a square matrix.
Tensor diagonal_nll(const Tensor& m, double temperature);

// mean_j KL(softmax(student_j / mu) || softmax(teacher_j / mu)).
Tensor rows_kl(const Tensor& student, const Tensor& teacher, double mu);

// Bidirectional hinge over a square similarity matrix; positives on the
// diagonal. Reports hinge-argument distances to the active KinkWatch.
Tensor triplet_hinge(const Tensor& s, double margin, NegativeStrategy strategy);

}  // namespace msa
