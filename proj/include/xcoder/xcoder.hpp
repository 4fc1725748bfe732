#ifndef XCODER_XCODER_HPP
#define XCODER_XCODER_HPP

#include "actstore.hpp"
#include "adam.hpp"
#include "attribution.hpp"
#include "crosscoder.hpp"
#include "error.hpp"
#include "genfeat.hpp"
#include "gradcheck.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "synthlab.hpp"
#include "trainer.hpp"

#endif
