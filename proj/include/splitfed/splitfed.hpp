#pragma once

#include "splitfed/architecture.hpp"
#include "splitfed/data.hpp"
#include "splitfed/experiment.hpp"
#include "splitfed/federation.hpp"
#include "splitfed/gradcheck.hpp"
#include "splitfed/kv_config.hpp"
#include "splitfed/layers.hpp"
#include "splitfed/loss.hpp"
#include "splitfed/model.hpp"
#include "splitfed/optim.hpp"
#include "splitfed/partition.hpp"
#include "splitfed/protocol.hpp"
#include "splitfed/sparse.hpp"
#include "splitfed/tensor.hpp"
#include "splitfed/traffic.hpp"
