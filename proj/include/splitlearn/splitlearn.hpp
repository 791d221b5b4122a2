#pragma once

#include "splitlearn/error.hpp"
#include "splitlearn/tensor.hpp"
#include "splitlearn/random.hpp"
#include "splitlearn/init.hpp"
#include "splitlearn/adam.hpp"
#include "splitlearn/kernels.hpp"
#include "splitlearn/layers.hpp"
#include "splitlearn/loss.hpp"
#include "splitlearn/network.hpp"
#include "splitlearn/chain.hpp"
#include "splitlearn/protocol.hpp"
#include "splitlearn/transport.hpp"
#include "splitlearn/data.hpp"
#include "splitlearn/metrics.hpp"
#include "splitlearn/orchestrator.hpp"
#include "splitlearn/harness.hpp"
