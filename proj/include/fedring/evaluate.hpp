#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedring/model.hpp"
#include "fedring/preprocess.hpp"
#include "fedring/server.hpp"
#include "fedring/volume.hpp"

namespace fedring::eval {

/// Hard-label Dice 2|P&G| / (|P| + |G|) for one class; 1 when both are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t class_id);

/// Sliding-window inference: windows of `window` (px, py, pz) at the given
/// stride, softmax averaged over overlaps, argmax with ties to the lowest class.
/// Windows are rounded up to a multiple of the model's downsampling factor and
/// never exceed the (rounded-up) volume; a volume smaller than a window is
/// padded with -1 and cropped back.
/// Returns a copy of `v` whose labels hold the prediction.
data::Volume predict_volume(const ml::SegModel& model, const data::Volume& v, std::array<std::size_t, 3> window,
                            std::array<std::size_t, 3> stride);
/// Stride = window / 2.
data::Volume predict_volume(const ml::SegModel& model, const data::Volume& v, const data::PatchSpec& window);

/// Foreground classes (label > 0) present in any of the volumes.
std::set<std::uint8_t> present_classes(const std::vector<data::Volume>& vols);

/// Mean over `classes` of the per-volume mean Dice.
double mean_dice(const ml::SegModel& model, const std::vector<data::Volume>& vols, const std::set<std::uint8_t>& classes,
                 const data::PatchSpec& window);

/// Hook scoring a global model by mean foreground Dice on the `.vol` files in
/// `data_dir`. The directory is read on every call; failures raise HookDataUnreadable.
server::ValidationHook dice_validation_hook(std::string data_dir, ml::ModelConfig cfg, data::PatchSpec window);

}  // namespace fedring::eval
