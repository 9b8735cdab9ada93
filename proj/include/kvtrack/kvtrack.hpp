#pragma once

// Umbrella header.

#include "kvtrack/aggregator.hpp"
#include "kvtrack/attention.hpp"
#include "kvtrack/bench.hpp"
#include "kvtrack/concurrency.hpp"
#include "kvtrack/evaluation.hpp"
#include "kvtrack/geometry.hpp"
#include "kvtrack/heads.hpp"
#include "kvtrack/image.hpp"
#include "kvtrack/io.hpp"
#include "kvtrack/keyframe.hpp"
#include "kvtrack/kv_cache.hpp"
#include "kvtrack/matrix.hpp"
#include "kvtrack/random.hpp"
#include "kvtrack/tracker.hpp"
