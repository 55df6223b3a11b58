#include "layerfuse/task.hpp"

namespace layerfuse {

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "markov-chain") return TaskKind::MarkovChain;
  if (name == "modular-addition") return TaskKind::ModularAddition;
  throw Error::invalid_input("unknown task kind '" + name + "'");
}

std::string task_kind_to_string(TaskKind kind) {
  return kind == TaskKind::MarkovChain ? "markov-chain" : "modular-addition";
}

TaskStream::TaskStream(const ToyTask& task, std::uint64_t salt)
    : task_(task), rng_(task.seed * 0x9e3779b97f4a7c15ULL + salt + 1) {
  if (task.vocab_size < 2) throw Error::invalid_input("task vocab_size must be >= 2");
  if (task.seq_len < 2) throw Error::invalid_input("task seq_len must be >= 2");

  if (task_.kind == TaskKind::MarkovChain) {
    // The permutation table depends only on the task seed, not the salt, so
    // train/eval/capture streams share one underlying chain.
    perms_.resize(task_.vocab_size);
    for (std::size_t b = 0; b < task_.vocab_size; ++b) {
      Rng perm_rng(task_.seed ^ (0xabcdef1234567ULL + b * 0x517cc1b727220a95ULL));
      auto& perm = perms_[b];
      perm.resize(task_.vocab_size);
      for (std::size_t i = 0; i < task_.vocab_size; ++i) perm[i] = static_cast<int>(i);
      for (std::size_t i = task_.vocab_size - 1; i > 0; --i) {
        const std::size_t j = perm_rng.uniform_int(i + 1);
        std::swap(perm[i], perm[j]);
      }
    }
  }
}

std::vector<int> TaskStream::next_sample() {
  const std::size_t v = task_.vocab_size;
  std::vector<int> tokens(task_.seq_len + 1);
  tokens[0] = static_cast<int>(rng_.uniform_int(v));
  tokens[1] = static_cast<int>(rng_.uniform_int(v));

  if (task_.kind == TaskKind::ModularAddition) {
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      tokens[i] = static_cast<int>((tokens[i - 1] + tokens[i - 2]) % static_cast<int>(v));
    }
    return tokens;
  }

  for (std::size_t i = 2; i < tokens.size(); ++i) {
    const int a = tokens[i - 2];
    const int b = tokens[i - 1];
    if (rng_.uniform() < kMarkovUniformMix) {
      tokens[i] = static_cast<int>(rng_.uniform_int(v));
    } else {
      tokens[i] = perms_[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)];
    }
  }
  return tokens;
}

std::vector<std::vector<int>> TaskStream::next_batch(std::size_t batch_size) {
  std::vector<std::vector<int>> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(next_sample());
  return batch;
}

}  // namespace layerfuse
