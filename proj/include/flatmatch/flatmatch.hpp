#pragma once

#include "flatmatch/checkpoint.hpp"
#include "flatmatch/config.hpp"
#include "flatmatch/data.hpp"
#include "flatmatch/diagnostics.hpp"
#include "flatmatch/error.hpp"
#include "flatmatch/gradcheck.hpp"
#include "flatmatch/losses.hpp"
#include "flatmatch/model.hpp"
#include "flatmatch/optim.hpp"
#include "flatmatch/param_vector.hpp"
#include "flatmatch/rng.hpp"
#include "flatmatch/tensor.hpp"
#include "flatmatch/trainers.hpp"
