#include "pmil/metrics.hpp"

#include <cstdio>

namespace pmil {

std::string metrics_csv_row(const MetricsRecord& r) {
    char num[64];
    std::string row = r.split + "," + std::to_string(r.seed) + "," + r.method + "," +
                      r.backbone_preset + "," + std::to_string(r.k) + "," +
                      std::to_string(r.prompt_sites) + ",";
    if (r.auc) {
        std::snprintf(num, sizeof(num), "%.6f", *r.auc);
        row += num;
    } else {
        row += "n/a";
    }
    std::snprintf(num, sizeof(num), ",%.6f,%.6f,", r.f1, r.acc);
    row += num;
    row += std::to_string(r.n_bags);
    return row;
}

}  // namespace pmil
