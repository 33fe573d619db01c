#pragma once

#include "rhtd/cli.hpp"
#include "rhtd/corpus.hpp"
#include "rhtd/errors.hpp"
#include "rhtd/eval.hpp"
#include "rhtd/lexicon.hpp"
#include "rhtd/log.hpp"
#include "rhtd/model.hpp"
#include "rhtd/numerics.hpp"
#include "rhtd/random.hpp"
#include "rhtd/training.hpp"
#include "rhtd/typed_decoders.hpp"
