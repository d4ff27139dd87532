#pragma once

#include "chsnet/checkpoint.hpp"
#include "chsnet/config.hpp"
#include "chsnet/data.hpp"
#include "chsnet/grad_check.hpp"
#include "chsnet/losses.hpp"
#include "chsnet/metrics.hpp"
#include "chsnet/network.hpp"
#include "chsnet/optim.hpp"
#include "chsnet/train.hpp"
#include "chsnet/uncertainty.hpp"
