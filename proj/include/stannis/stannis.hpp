#pragma once

#include "stannis/error.hpp"
#include "stannis/io.hpp"
#include "stannis/minitrain.hpp"
#include "stannis/partitioner.hpp"
#include "stannis/profiles.hpp"
#include "stannis/simengine.hpp"
#include "stannis/tuner.hpp"
#include "stannis/verify.hpp"
