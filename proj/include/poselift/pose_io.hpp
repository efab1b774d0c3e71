#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselift/errors.hpp"
#include "poselift/skeleton.hpp"

namespace poselift::io {

// JSON Lines pose files: one record per frame,
//   {"sequence": s, "frame": f, "joints": [[x, y(, z)], ...]}
// "sequence" is optional on read (defaults to 0); frames are ordered by index.
template <std::size_t Dim>
void write_pose_jsonl(const std::string& path,
                      const std::vector<skeleton::JointSequence<Dim>>& sequences) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    for (std::size_t f = 0; f < seq.frames(); ++f) {
      nlohmann::json joints = nlohmann::json::array();
      for (std::size_t j = 0; j < seq.joints(); ++j) {
        nlohmann::json p = nlohmann::json::array();
        for (std::size_t c = 0; c < Dim; ++c) p.push_back(seq.at(f, j, c));
        joints.push_back(std::move(p));
      }
      nlohmann::json rec = {{"sequence", s}, {"frame", f}, {"joints", std::move(joints)}};
      out << rec.dump() << '\n';
    }
  }
}

template <std::size_t Dim>
std::vector<skeleton::JointSequence<Dim>> read_pose_jsonl(const std::string& path,
                                                          std::size_t expected_joints) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::map<std::size_t, std::map<std::size_t, std::vector<double>>> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": " + e.what());
    }
    if (!rec.contains("frame") || !rec.contains("joints") || !rec["joints"].is_array())
      throw IoError(where + ": record needs 'frame' and 'joints'");
    const std::size_t seq = rec.value("sequence", std::size_t{0});
    const std::size_t frame = rec["frame"].get<std::size_t>();
    const auto& joints = rec["joints"];
    if (joints.size() != expected_joints)
      throw IoError(where + ": expected " + std::to_string(expected_joints) +
                    " joints, got " + std::to_string(joints.size()));
    std::vector<double> flat;
    flat.reserve(expected_joints * Dim);
    for (const auto& p : joints) {
      if (!p.is_array() || p.size() != Dim)
        throw IoError(where + ": each joint needs " + std::to_string(Dim) + " coordinates");
      for (const auto& v : p) {
        if (!v.is_number()) throw IoError(where + ": non-numeric coordinate");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw IoError(where + ": non-finite coordinate");
        flat.push_back(x);
      }
    }
    if (!frames[seq].emplace(frame, std::move(flat)).second)
      throw IoError(where + ": duplicate frame " + std::to_string(frame));
  }
  std::vector<skeleton::JointSequence<Dim>> out;
  for (auto& [seq, by_frame] : frames) {
    std::size_t expect = 0;
    skeleton::JointSequence<Dim> s(by_frame.size(), expected_joints);
    for (auto& [f, flat] : by_frame) {
      if (f != expect) throw IoError(path + ": sequence " + std::to_string(seq) +
                                     " is missing frame " + std::to_string(expect));
      std::copy(flat.begin(), flat.end(),
                s.tensor().storage().begin() + static_cast<std::ptrdiff_t>(f * flat.size()));
      ++expect;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace poselift::io
