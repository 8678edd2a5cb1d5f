#pragma once

// EgoLCD long-short generative memory, desk scale: dense kernels, narrative
// scripts, the sparse KV memory repository, a toy rectified-flow denoiser,
// the block-wise generation pipeline, and the NRDP drift metric.

#include "egolcd/errors.hpp"
#include "egolcd/flow.hpp"
#include "egolcd/io.hpp"
#include "egolcd/memory.hpp"
#include "egolcd/model.hpp"
#include "egolcd/narrative.hpp"
#include "egolcd/nrdp.hpp"
#include "egolcd/pipeline.hpp"
#include "egolcd/sparse_cache.hpp"
#include "egolcd/tensor.hpp"
