#pragma once

#include <filesystem>

#include "mclaro/config.hpp"
#include "mclaro/mapping.hpp"
#include "mclaro/training.hpp"

namespace mclaro::pipeline {

// Raised when a stage is asked to run before its inputs exist.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Experiment {
public:
  Experiment(Config cfg, std::filesystem::path out_dir);

  // stage in {phantom, simulate, train, reconstruct, map, evaluate, all}.
  // Stages are idempotent: a stage whose marker carries the current config
  // hash is skipped, leaving its artifacts untouched.
  void run(const std::string& stage);

  const Config& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }

  // exposed for tests
  std::string stage_hash(const std::string& stage) const;
  training::Dataset load_dataset() const;

private:
  Config cfg_;
  std::filesystem::path out_;

  bool stage_done(const std::string& stage) const;
  void mark_done(const std::string& stage);
  void require_done(const std::string& stage) const;

  void stage_phantom();
  void stage_simulate();
  void stage_train();
  void stage_reconstruct();
  void stage_map();
  void stage_evaluate();

  struct PhantomSet {
    phantom::TissuePhantom ph;
    phantom::CoilSet coils;
    RGrid field_hz;
  };
  PhantomSet load_phantom(const std::string& set, int index) const;
  seqsim::ContrastImageSet load_images(const std::string& set, int index) const;
  training::Sample make_sample(const seqsim::ContrastImageSet& images,
                               const phantom::CoilSet& coils, int slice_x,
                               std::uint64_t noise_stream) const;
  training::TrainConfig train_config() const;
  mapping::QuantMaps load_maps(const std::string& arm, int index) const;
  void save_maps(const std::string& arm, int index,
                 const mapping::QuantMaps& maps, const std::string& stage,
                 const std::string& hash);
};

}  // namespace mclaro::pipeline
