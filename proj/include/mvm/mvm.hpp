#pragma once

#include "mvm/numerics.hpp"
#include "mvm/memory.hpp"
#include "mvm/losses.hpp"
#include "mvm/config.hpp"
#include "mvm/model.hpp"
#include "mvm/optim.hpp"
#include "mvm/io.hpp"
#include "mvm/synthdata.hpp"
#include "mvm/checkpoint.hpp"
#include "mvm/harness.hpp"
