#pragma once

#include "lineest/errors.hpp"
#include "lineest/netmodel.hpp"
#include "lineest/feeder_io.hpp"
#include "lineest/powerflow.hpp"
#include "lineest/ousim.hpp"
#include "lineest/measurement_io.hpp"
#include "lineest/stage1.hpp"
#include "lineest/stage2.hpp"
#include "lineest/pipeline.hpp"
#include "lineest/estimate_io.hpp"
#include "lineest/evaluation.hpp"
