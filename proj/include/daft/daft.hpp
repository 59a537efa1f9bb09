#pragma once

// Umbrella header for the DAFT inpainting library.

#include "daft/adversary.hpp"
#include "daft/checkpoint.hpp"
#include "daft/config.hpp"
#include "daft/core.hpp"
#include "daft/decoder.hpp"
#include "daft/encoder.hpp"
#include "daft/gradcheck.hpp"
#include "daft/image_io.hpp"
#include "daft/mask.hpp"
#include "daft/maskgen.hpp"
#include "daft/metrics.hpp"
#include "daft/params.hpp"
#include "daft/scene.hpp"
#include "daft/tensor.hpp"
#include "daft/text.hpp"
#include "daft/train.hpp"
