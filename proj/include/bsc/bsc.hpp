#pragma once

#include "binarize.hpp"
#include "checkpoint.hpp"
#include "conv.hpp"
#include "coords.hpp"
#include "cost.hpp"
#include "diagnose.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "kernel_map.hpp"
#include "layers.hpp"
#include "matrix.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "point_io.hpp"
#include "search.hpp"
#include "synthetic.hpp"
#include "tape.hpp"
#include "train.hpp"
#include "voxelize.hpp"
