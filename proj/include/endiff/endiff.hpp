#pragma once

#include "endiff/errors.hpp"
#include "endiff/rng.hpp"
#include "endiff/geom.hpp"
#include "endiff/block_linalg.hpp"
#include "endiff/autodiff.hpp"
#include "endiff/params.hpp"
#include "endiff/forward_transform.hpp"
#include "endiff/equinet.hpp"
#include "endiff/diffusion.hpp"
#include "endiff/model.hpp"
#include "endiff/train.hpp"
#include "endiff/sampler.hpp"
#include "endiff/molecule.hpp"
#include "endiff/synthetic.hpp"
#include "endiff/metrics.hpp"
#include "endiff/config.hpp"
#include "endiff/checkpoint.hpp"
