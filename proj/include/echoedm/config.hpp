// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON forms of the data-generation and training settings shared by all
// commands. Parsing rejects unknown keys and lists every bad field by name.
//
// Data config (top level or under "data"):
//   height, width, fps, duration_s, n_train, n_val, n_test,
//   ef_distribution ("uniform" | "skewed"), ef_range [min, max],
//   skew {weight, mean, std}, heart_rate_range [min, max], cone_angle_deg,
//   speckle {enabled, strength, decorrelation, smooth}, seed
//
// Train config (top level or under "train"):
//   learning_rate, batch_size, grad_accum, ema_decay, time_layer_drop_prob,
//   cond_noise_max, max_steps, seed, adam_beta1, adam_beta2, adam_eps

#include <cstdint>
#include <filesystem>
#include <string>

#include "echoedm/synthdata.hpp"
#include "echoedm/trainer.hpp"

namespace echoedm {

std::string data_config_to_json(const DataGenConfig& c);
/// Missing keys keep their defaults. Throws ValidationError.
DataGenConfig data_config_from_json(const std::string& text, DataGenConfig base = {});

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text, TrainConfig base = {});

/// Value of ECHOEDM_CONFIG_DIR, empty when unset.
std::filesystem::path default_config_dir();

/// `name` itself when it exists, else `<config dir>/name` or
/// `<config dir>/name.json`. Throws IoError when nothing is found.
std::filesystem::path resolve_config_path(const std::string& name);

std::string read_text_file(const std::filesystem::path& p);
/// Writes through a temporary file and renames it into place.
void write_text_file(const std::filesystem::path& p, const std::string& text);

/// CRC-32 of the bytes, for run records.
std::uint32_t text_hash(const std::string& text);

}  // namespace echoedm
