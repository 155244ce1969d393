#pragma once

#include "cags/common.hpp"
#include "cags/scene.hpp"
#include "cags/binary_io.hpp"
#include "cags/ply.hpp"
#include "cags/spatial_index.hpp"
#include "cags/propagation.hpp"
#include "cags/renderer.hpp"
#include "cags/image_io.hpp"
#include "cags/synthetic.hpp"
#include "cags/losses.hpp"
#include "cags/training.hpp"
#include "cags/hdbscan.hpp"
#include "cags/semantics.hpp"
#include "cags/eval.hpp"
#include "cags/config.hpp"
#include "cags/dataset.hpp"
#include "cags/provenance.hpp"
#include "cags/log.hpp"
