#pragma once

#include "ssda/app.hpp"
#include "ssda/augment.hpp"
#include "ssda/checkpoint.hpp"
#include "ssda/config.hpp"
#include "ssda/data.hpp"
#include "ssda/error.hpp"
#include "ssda/eval.hpp"
#include "ssda/image.hpp"
#include "ssda/losses.hpp"
#include "ssda/model.hpp"
#include "ssda/ops.hpp"
#include "ssda/params.hpp"
#include "ssda/rng.hpp"
#include "ssda/selftrain.hpp"
#include "ssda/tensor.hpp"
