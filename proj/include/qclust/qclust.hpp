#pragma once

#include "qclust/config.hpp"
#include "qclust/dissimilarity.hpp"
#include "qclust/error.hpp"
#include "qclust/evaluate.hpp"
#include "qclust/features.hpp"
#include "qclust/hclust.hpp"
#include "qclust/ingest.hpp"
#include "qclust/parallel.hpp"
#include "qclust/pipeline.hpp"
#include "qclust/preprocess.hpp"
#include "qclust/synth.hpp"
#include "qclust/tree.hpp"
