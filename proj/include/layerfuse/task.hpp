#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layerfuse/errors.hpp"
#include "layerfuse/rng.hpp"

namespace layerfuse {

enum class TaskKind { MarkovChain, ModularAddition };

TaskKind task_kind_from_string(const std::string& name);
std::string task_kind_to_string(TaskKind kind);

// Seeded synthetic sequence task. Both kinds have an exactly uniform
// per-symbol marginal, so an uninformed model scores chance-level accuracy:
//   markov-chain      order-2 chain; next symbol is perm[b](a) with
//                     probability 1-gamma (context a,b), else uniform. Each
//                     perm[b] is a bijection, which keeps uniform pairs
//                     stationary.
//   modular-addition  x[i+1] = (x[i] + x[i-1]) mod vocab from two uniform
//                     seeds; deterministic continuation.
struct ToyTask {
  TaskKind kind = TaskKind::MarkovChain;
  std::size_t vocab_size = 16;
  std::size_t seq_len = 16;
  std::uint64_t seed = 0;
};

constexpr double kMarkovUniformMix = 0.25;  // gamma above

// Deterministic stream of samples for one task. Each sample holds
// seq_len + 1 tokens; the final token is the continuation label for the
// last model-visible position.
class TaskStream {
 public:
  // `salt` separates train / eval / capture streams drawn from one task.
  TaskStream(const ToyTask& task, std::uint64_t salt);

  std::vector<int> next_sample();
  std::vector<std::vector<int>> next_batch(std::size_t batch_size);

  [[nodiscard]] const ToyTask& task() const { return task_; }

 private:
  ToyTask task_;
  Rng rng_;
  std::vector<std::vector<int>> perms_;  // markov-chain: perm[b][a]
};

}  // namespace layerfuse
