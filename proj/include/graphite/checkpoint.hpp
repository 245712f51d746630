/*
 * Copyright 2026 The GRAPHITE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Flat-text checkpoint container.
//
//   GRAPHITE-CHECKPOINT 1
//   section <name>
//   meta <key> <value>
//   tensor <name> <rows> <cols>
//   <rows*cols space-separated values, row-major, shortest round-trip form>
//   end
//
// A file may hold several sections; `milnet` and `gatsan` are used by the
// two training stages.

#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "graphite/error.hpp"
#include "graphite/gatsan.hpp"
#include "graphite/milnet.hpp"
#include "graphite/nn.hpp"

namespace graphite {

inline constexpr const char* kCheckpointMagic = "GRAPHITE-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Tensor value;
};

struct CheckpointSection {
  std::string name;
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;

  const std::string& require_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) {
      throw ValidationError("checkpoint section '" + name + "': missing meta key '" + key + "'");
    }
    return it->second;
  }
  std::size_t meta_size(const std::string& key) const {
    const std::string& v = require_meta(key);
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ValidationError("checkpoint section '" + name + "': meta '" + key + "' is not an integer");
    }
    return out;
  }
};

struct Checkpoint {
  std::vector<CheckpointSection> sections;

  const CheckpointSection* find(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
  const CheckpointSection& require(const std::string& name) const {
    if (const auto* s = find(name)) return *s;
    throw ValidationError("checkpoint has no section '" + name + "'");
  }
};

inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  for (const auto& s : ck.sections) {
    os << "section " << s.name << '\n';
    for (const auto& [k, v] : s.meta) os << "meta " << k << ' ' << v << '\n';
    for (const auto& t : s.tensors) {
      os << "tensor " << t.name << ' ' << t.value.rows << ' ' << t.value.cols << '\n';
      for (std::size_t i = 0; i < t.value.size(); ++i) {
        if (i) os << ' ';
        os << format_double(t.value.data[i]);
      }
      os << '\n';
    }
    os << "end\n";
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> ValidationError {
    return ValidationError("checkpoint line " + std::to_string(lineno) + ": " + msg);
  };
  auto next = [&]() {
    ++lineno;
    return static_cast<bool>(std::getline(is, line));
  };
  if (!next()) throw ValidationError("checkpoint: empty input");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version) || magic != kCheckpointMagic) throw fail("bad header");
    if (version != kCheckpointVersion) {
      throw fail("unsupported version " + std::to_string(version));
    }
  }
  Checkpoint ck;
  CheckpointSection* cur = nullptr;
  while (next()) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "section") {
      if (cur) throw fail("nested section");
      ck.sections.push_back({});
      cur = &ck.sections.back();
      if (!(ls >> cur->name)) throw fail("section without name");
      if (ck.find(cur->name) != cur) throw fail("duplicate section '" + cur->name + "'");
    } else if (kw == "meta") {
      if (!cur) throw fail("meta outside a section");
      std::string k, v;
      if (!(ls >> k >> v)) throw fail("meta needs key and value");
      cur->meta[k] = v;
    } else if (kw == "tensor") {
      if (!cur) throw fail("tensor outside a section");
      CheckpointTensor t;
      std::size_t r = 0, c = 0;
      if (!(ls >> t.name >> r >> c)) throw fail("tensor needs name, rows, cols");
      t.value = Tensor(r, c);
      if (!next()) throw fail("missing values for tensor " + t.name);
      const char* p = line.data();
      const char* end = line.data() + line.size();
      for (std::size_t i = 0; i < t.value.size(); ++i) {
        while (p < end && *p == ' ') ++p;
        auto [q, ec] = std::from_chars(p, end, t.value.data[i]);
        if (ec != std::errc()) {
          throw fail("tensor " + t.name + ": bad value at index " + std::to_string(i));
        }
        p = q;
      }
      while (p < end && *p == ' ') ++p;
      if (p != end) throw fail("tensor " + t.name + ": more than " + std::to_string(r * c) + " values");
      cur->tensors.push_back(std::move(t));
    } else if (kw == "end") {
      if (!cur) throw fail("end outside a section");
      cur = nullptr;
    } else {
      throw fail("unknown record '" + kw + "'");
    }
  }
  if (cur) throw ValidationError("checkpoint: section '" + cur->name + "' is not terminated");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write checkpoint " + path);
  write_checkpoint(os, ck);
  if (!os) throw RuntimeError("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("missing checkpoint " + path);
  try {
    return read_checkpoint(is);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void store_params(CheckpointSection& s, const ParamList& params) {
  for (const auto& p : params) {
    Tensor copy(p.tensor->rows, p.tensor->cols);
    copy.data = p.tensor->data;
    s.tensors.push_back({p.name, std::move(copy)});
  }
}

/// Copies tensors into `params` by name; every parameter must be present
/// with a matching shape and no extra tensors are allowed.
inline void load_params(const CheckpointSection& s, const ParamList& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : s.tensors) by_name[t.name] = &t.value;
  if (by_name.size() != params.size()) {
    throw ValidationError("checkpoint section '" + s.name + "': " + std::to_string(by_name.size()) +
                          " tensors for " + std::to_string(params.size()) + " parameters");
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw ValidationError("checkpoint section '" + s.name + "': missing tensor " + p.name);
    }
    const Tensor& t = *it->second;
    if (t.rows != p.tensor->rows || t.cols != p.tensor->cols) {
      throw ValidationError("checkpoint section '" + s.name + "': tensor " + p.name + " has shape " +
                            std::to_string(t.rows) + "x" + std::to_string(t.cols) + ", expected " +
                            std::to_string(p.tensor->rows) + "x" + std::to_string(p.tensor->cols));
    }
    p.tensor->data = t.data;
  }
}

inline CheckpointSection mil_section(MilModel& model) {
  CheckpointSection s{"milnet", {}, {}};
  const auto& c = model.config;
  s.meta = {{"input_dim", std::to_string(c.input_dim)},
            {"projector_hidden", std::to_string(c.projector_hidden)},
            {"embed_dim", std::to_string(c.embed_dim)},
            {"key_dim", std::to_string(c.key_dim)},
            {"patient_hidden", std::to_string(c.patient_hidden)},
            {"patient_dim", std::to_string(c.patient_dim)}};
  store_params(s, model.parameters());
  return s;
}

inline MilModel mil_from_section(const CheckpointSection& s) {
  MilModelConfig c;
  c.input_dim = s.meta_size("input_dim");
  c.projector_hidden = s.meta_size("projector_hidden");
  c.embed_dim = s.meta_size("embed_dim");
  c.key_dim = s.meta_size("key_dim");
  c.patient_hidden = s.meta_size("patient_hidden");
  c.patient_dim = s.meta_size("patient_dim");
  MilModel m(c);
  load_params(s, m.parameters());
  return m;
}

inline CheckpointSection stage2_section(Stage2Model& model) {
  CheckpointSection s{"gatsan", {}, {}};
  const auto& c = model.gat.config;
  s.meta = {{"in_dim", std::to_string(c.in_dim)},
            {"heads", std::to_string(c.heads)},
            {"head_dim", std::to_string(c.head_dim)},
            {"out_dim", std::to_string(c.out_dim)},
            {"leaky_slope", format_double(c.leaky_slope)},
            {"self_loops", c.self_loops ? "1" : "0"},
            {"levels", std::to_string(model.san.num_levels())}};
  store_params(s, model.parameters());
  return s;
}

inline Stage2Model stage2_from_section(const CheckpointSection& s) {
  GatConfig c;
  c.in_dim = s.meta_size("in_dim");
  c.heads = s.meta_size("heads");
  c.head_dim = s.meta_size("head_dim");
  c.out_dim = s.meta_size("out_dim");
  const std::string& slope = s.require_meta("leaky_slope");
  auto [p, ec] = std::from_chars(slope.data(), slope.data() + slope.size(), c.leaky_slope);
  if (ec != std::errc()) throw ValidationError("checkpoint section 'gatsan': bad leaky_slope");
  c.self_loops = s.require_meta("self_loops") == "1";
  Stage2Model m;
  m.gat = GatLayer(c);
  m.san = SanModel(s.meta_size("levels"), c.out_dim);
  load_params(s, m.parameters());
  return m;
}

}  // namespace graphite
