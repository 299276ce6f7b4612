#pragma once

#include "ldet/autodiff.hpp"
#include "ldet/config.hpp"
#include "ldet/data.hpp"
#include "ldet/detector.hpp"
#include "ldet/error.hpp"
#include "ldet/lora.hpp"
#include "ldet/matrix.hpp"
#include "ldet/package.hpp"
#include "ldet/rank.hpp"
#include "ldet/rng.hpp"
#include "ldet/svd.hpp"
#include "ldet/swin.hpp"
#include "ldet/util.hpp"
