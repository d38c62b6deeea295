#pragma once

// Small models and datasets shared by the pipeline tests.

#include <map>
#include <set>
#include <vector>

#include "dipt/data.hpp"
#include "dipt/teacher.hpp"

namespace dipt::testing {

inline teacher::TeacherConfig tiny_teacher_config(int dim = 16) {
  teacher::TeacherConfig c;
  c.dim = dim;
  c.heads = 4;
  c.mlp_dim = 2 * dim;
  c.image_size = 16;
  c.conv_channels = {4, 8};
  return c;
}

inline data::DatasetSpec tiny_spec(int domains, int per_class, std::uint64_t seed) {
  data::DatasetSpec s;
  s.num_domains = domains;
  s.samples_per_class_per_domain = per_class;
  s.image_size = 16;
  s.seed = seed;
  return s;
}

// Loader that records every (stage, rotation, owner, record domain) access.
class LoggingLoader : public data::ImageLoader {
 public:
  struct Access {
    data::AccessContext ctx;
    int domain;
  };

  Image load(const data::DomainDataset& ds, const data::Record& r, const data::AccessContext& ctx) const override {
    log.push_back({ctx, r.domain_id});
    return inner_.load(ds, r, ctx);
  }

  std::set<int> domains_read(data::Stage stage) const {
    std::set<int> out;
    for (const auto& a : log)
      if (a.ctx.stage == stage) out.insert(a.domain);
    return out;
  }

  mutable std::vector<Access> log;

 private:
  data::FileImageLoader inner_;
};

}  // namespace dipt::testing
