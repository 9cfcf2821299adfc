#pragma once

#include "lewm/array.hpp"
#include "lewm/autograd.hpp"
#include "lewm/checkpoint.hpp"
#include "lewm/commands.hpp"
#include "lewm/config.hpp"
#include "lewm/dataset.hpp"
#include "lewm/env.hpp"
#include "lewm/error.hpp"
#include "lewm/eval.hpp"
#include "lewm/grad_check.hpp"
#include "lewm/kv.hpp"
#include "lewm/losses.hpp"
#include "lewm/optimizer.hpp"
#include "lewm/planner.hpp"
#include "lewm/rng.hpp"
#include "lewm/sigreg.hpp"
#include "lewm/train.hpp"
#include "lewm/worldmodel.hpp"
