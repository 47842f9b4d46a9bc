#pragma once

#include "metanet/common.hpp"
#include "metanet/neural_field.hpp"
#include "metanet/raster.hpp"
#include "metanet/fea.hpp"
#include "metanet/homogenization.hpp"
#include "metanet/objectives.hpp"
#include "metanet/training.hpp"
#include "metanet/postprocess.hpp"
#include "metanet/config.hpp"
#include "metanet/bench.hpp"
