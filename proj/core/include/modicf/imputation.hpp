#pragma once

#include "modicf/dataset.hpp"
#include "modicf/random.hpp"

namespace modicf {

// Substitute completions for missing rows. Each fills every missing cell and marks it generated.

// Per-dimension mean of the observed rows.
void impute_mean(DatasetBundle& bundle);
// Rows stay zero.
void impute_zero(DatasetBundle& bundle);
// Independent Gaussian draws per dimension with the observed mean and standard deviation.
void impute_random(DatasetBundle& bundle, Rng& rng);
// Copy of the row of the most similar item observed in that modality. Similarity is the
// cosine over the concatenation of the target item's observed modalities; ties go to the
// lower item index.
void impute_nearest(DatasetBundle& bundle);

}  // namespace modicf
