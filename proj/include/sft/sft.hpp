#pragma once

#include "sft/backbone.hpp"
#include "sft/checkpoint.hpp"
#include "sft/common.hpp"
#include "sft/config.hpp"
#include "sft/eval.hpp"
#include "sft/event_io.hpp"
#include "sft/fusion.hpp"
#include "sft/graph.hpp"
#include "sft/head.hpp"
#include "sft/losses.hpp"
#include "sft/nn.hpp"
#include "sft/pipeline.hpp"
#include "sft/synthgen.hpp"
#include "sft/tracker.hpp"
#include "sft/trainer.hpp"
