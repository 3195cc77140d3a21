#ifndef MICROID_GRADCAM_HPP_
#define MICROID_GRADCAM_HPP_

#include <filesystem>
#include <vector>

#include "microid/data_core.hpp"
#include "microid/slowfast.hpp"
#include "microid/volume.hpp"

namespace microid {

struct SaliencyMap {
  Volume raw;        // (1, T', H', W') at the pathway's last conv layer, >= 0
  Volume upsampled;  // (1, T, H, W), max 1 unless raw is all zero
  std::vector<double> channel_weights;
  int target_class = 0;
  Pathway pathway = Pathway::kFast;
};

// Per-channel mean of d(logit[target_class]) / d(A) over T' x H' x W', where A
// is the final block output of `pathway`.
std::vector<double> gradcam_channel_weights(const Model& model, const ForwardTrace& trace,
                                            int target_class, Pathway pathway);

SaliencyMap compute_gradcam(const Model& model, const ClipTensor& clip, int target_class,
                            Pathway pathway = Pathway::kFast);

// Trilinear resampling with half-pixel centers, edges clamped.
Volume upsample_trilinear(const Volume& in, int frames, int height, int width);

struct OverlayOptions {
  double max_alpha = 0.6;
};

// Blends green over every frame with alpha = max_alpha * saliency and writes
// out_dir/NNNNNN.png. Returns the written paths in frame order.
std::vector<std::filesystem::path> render_overlays(const SaliencyMap& map, const ClipTensor& clip,
                                                   const std::filesystem::path& out_dir,
                                                   const OverlayOptions& options = {});

// Raw map as a packed tensor (T', H', W', 1).
void write_saliency(const SaliencyMap& map, const std::filesystem::path& path);

// Share of the upsampled saliency mass where `mask` (same shape) is nonzero;
// 0 for an all-zero map.
double saliency_mass_inside(const Volume& upsampled, const Volume& mask);

}  // namespace microid

#endif  // MICROID_GRADCAM_HPP_
