#pragma once

#include "cpcl/affinity.hpp"
#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/hcm.hpp"
#include "cpcl/io.hpp"
#include "cpcl/metrics.hpp"
#include "cpcl/oplm.hpp"
#include "cpcl/pmm.hpp"
#include "cpcl/trainer.hpp"
#include "cpcl/types.hpp"
