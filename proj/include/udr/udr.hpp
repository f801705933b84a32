#pragma once

// Umbrella header for the demonstration-retrieval toolkit.

#include "udr/bi_encoder.hpp"
#include "udr/bm25.hpp"
#include "udr/corpus.hpp"
#include "udr/dense_index.hpp"
#include "udr/error.hpp"
#include "udr/feedback.hpp"
#include "udr/inference.hpp"
#include "udr/losses.hpp"
#include "udr/optimizer.hpp"
#include "udr/scorer.hpp"
#include "udr/text.hpp"
#include "udr/trainer.hpp"
