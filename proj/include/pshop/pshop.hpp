#pragma once

#include "pshop/complexity.hpp"
#include "pshop/config.hpp"
#include "pshop/decoder.hpp"
#include "pshop/encoder.hpp"
#include "pshop/error.hpp"
#include "pshop/gbdt.hpp"
#include "pshop/io.hpp"
#include "pshop/matrix.hpp"
#include "pshop/metrics.hpp"
#include "pshop/model.hpp"
#include "pshop/phantom.hpp"
#include "pshop/pipeline.hpp"
#include "pshop/png.hpp"
#include "pshop/preprocess.hpp"
#include "pshop/saab.hpp"
#include "pshop/volume.hpp"
