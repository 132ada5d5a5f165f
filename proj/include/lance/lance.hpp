#pragma once

// Umbrella header for the LANCE codec library.

#include "lance/bitstream.hpp"
#include "lance/config.hpp"
#include "lance/context.hpp"
#include "lance/decoder.hpp"
#include "lance/diffgraph.hpp"
#include "lance/encoder.hpp"
#include "lance/entropy_model.hpp"
#include "lance/errors.hpp"
#include "lance/expgolomb.hpp"
#include "lance/image.hpp"
#include "lance/metrics.hpp"
#include "lance/model.hpp"
#include "lance/pyramid.hpp"
#include "lance/quantize.hpp"
#include "lance/range_coder.hpp"
