#pragma once

namespace hgd {

/// Worker count: `requested` if positive, else HGDLMM_THREADS, else the hardware count.
/// Always 1 in builds without OpenMP.
int resolve_threads(int requested);

}  // namespace hgd
