#pragma once

// Scan entries + split -> model-ready samples for one view and subset.

#include <mammoseg/datasplit.hpp>
#include <mammoseg/evaluation.hpp>
#include <mammoseg/ingest.hpp>
#include <mammoseg/preprocess.hpp>

#include <optional>
#include <vector>

namespace mammoseg {

/// Split records for every annotated entry (density from density.csv, else the annotation).
std::vector<SplitRecord> split_records(const std::vector<DatasetEntry>& entries);

/// Annotated entries of `view` whose exam the split places in `subset`. Exams absent from the
/// split are skipped.
std::vector<DatasetEntry> select_entries(const std::vector<DatasetEntry>& entries, const SplitAssignment& split,
                                         View view, Subset subset);

/// Load, preprocess and rasterize one annotated entry onto the model grid.
EvalSample make_sample(const DatasetEntry& entry, const PreprocConfig& cfg);

std::vector<EvalSample> load_samples(const std::vector<DatasetEntry>& entries, const SplitAssignment& split, View view,
                                     Subset subset, const PreprocConfig& cfg);

}  // namespace mammoseg
