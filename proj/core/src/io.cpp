#include "indexfuse/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "indexfuse/errors.hpp"

namespace indexfuse::io {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

double parse_double(const std::string& cell, long row, const std::string& column) {
    double value = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    const auto res = std::from_chars(begin, end, value);
    if (res.ec != std::errc() || res.ptr != end || !std::isfinite(value))
        throw IngestionError("non-numeric cell '" + cell + "' at row " + std::to_string(row) +
                                 ", column " + column,
                             row, column);
    return value;
}

}  // namespace

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

model::LongitudinalDataset read_dataset(std::istream& in, const std::string& source_name) {
    std::string line;
    if (!std::getline(in, line))
        throw IngestionError("empty input: " + source_name, 0, "");
    if (!line.empty() && line.front() == '\xEF' && line.size() >= 3)
        line = line.substr(3);  // strip UTF-8 BOM

    const std::vector<std::string> header = split_csv_line(line);
    int col_subject = -1, col_time = -1, col_response = -1;
    std::map<int, int> z_cols, x_cols;  // index (1-based) -> column position
    for (int c = 0; c < static_cast<int>(header.size()); ++c) {
        const std::string name = lower(header[c]);
        if (name == "subject_id")
            col_subject = c;
        else if (name == "time")
            col_time = c;
        else if (name == "response")
            col_response = c;
        else if (name.size() > 1 && name[0] == 'z' &&
                 name.find_first_not_of("0123456789", 1) == std::string::npos)
            z_cols[std::stoi(name.substr(1))] = c;
        else if (name.size() > 1 && name[0] == 'x' &&
                 name.find_first_not_of("0123456789", 1) == std::string::npos)
            x_cols[std::stoi(name.substr(1))] = c;
        else
            throw IngestionError("unknown column '" + header[c] + "'", 1, header[c]);
    }
    if (col_subject < 0) throw IngestionError("missing column subject_id", 1, "subject_id");
    if (col_time < 0) throw IngestionError("missing column time", 1, "time");
    if (col_response < 0) throw IngestionError("missing column response", 1, "response");
    if (z_cols.empty()) throw IngestionError("at least one z column is required", 1, "z1");
    const int d_w = static_cast<int>(z_cols.size());
    const int d_beta = static_cast<int>(x_cols.size());
    for (int j = 1; j <= d_w; ++j)
        if (!z_cols.count(j))
            throw IngestionError("z columns must be numbered z1..z" + std::to_string(d_w), 1,
                                 "z" + std::to_string(j));
    for (int j = 1; j <= d_beta; ++j)
        if (!x_cols.count(j))
            throw IngestionError("x columns must be numbered x1..x" + std::to_string(d_beta), 1,
                                 "x" + std::to_string(j));

    struct Row {
        double time;
        double response;
        std::vector<double> z, x;
    };
    std::vector<std::string> subject_order;
    std::map<std::string, std::vector<Row>> rows_by_subject;
    long row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (trim(line).empty()) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw IngestionError("row " + std::to_string(row_no) + " has " +
                                     std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(header.size()),
                                 row_no, "");
        const std::string id = cells[col_subject];
        if (id.empty())
            throw IngestionError("empty subject_id at row " + std::to_string(row_no), row_no,
                                 "subject_id");
        Row r;
        r.time = parse_double(cells[col_time], row_no, "time");
        r.response = parse_double(cells[col_response], row_no, "response");
        r.z.resize(d_w);
        for (int j = 1; j <= d_w; ++j)
            r.z[j - 1] = parse_double(cells[z_cols[j]], row_no, "z" + std::to_string(j));
        r.x.resize(d_beta);
        for (int j = 1; j <= d_beta; ++j)
            r.x[j - 1] = parse_double(cells[x_cols[j]], row_no, "x" + std::to_string(j));
        auto it = rows_by_subject.find(id);
        if (it == rows_by_subject.end()) {
            subject_order.push_back(id);
            it = rows_by_subject.emplace(id, std::vector<Row>()).first;
        }
        it->second.push_back(std::move(r));
    }
    if (subject_order.empty())
        throw IngestionError("no data rows in " + source_name, row_no, "");

    model::LongitudinalDataset data;
    data.d_w = d_w;
    data.d_beta = d_beta;
    for (const std::string& id : subject_order) {
        auto& rows = rows_by_subject[id];
        std::stable_sort(rows.begin(), rows.end(),
                         [](const Row& a, const Row& b) { return a.time < b.time; });
        model::Subject s;
        s.id = id;
        const int m = static_cast<int>(rows.size());
        s.times.resize(m);
        s.response.resize(m);
        s.z.resize(m, d_w);
        s.x.resize(m, d_beta);
        for (int k = 0; k < m; ++k) {
            s.times[k] = rows[k].time;
            s.response[k] = rows[k].response;
            for (int j = 0; j < d_w; ++j) s.z(k, j) = rows[k].z[j];
            for (int j = 0; j < d_beta; ++j) s.x(k, j) = rows[k].x[j];
        }
        data.subjects.push_back(std::move(s));
    }

    // constant x column breaks identifiability (the intercept lives in m)
    for (int j = 0; j < d_beta; ++j) {
        bool constant = data.total_visits() > 1;
        const double first = data.subjects.front().x(0, j);
        for (const auto& s : data.subjects) {
            for (int k = 0; k < s.visits(); ++k)
                if (s.x(k, j) != first) {
                    constant = false;
                    break;
                }
            if (!constant) break;
        }
        if (constant)
            throw IngestionError("column x" + std::to_string(j + 1) +
                                     " is constant; constant covariates are not allowed in x",
                                 -1, "x" + std::to_string(j + 1));
    }
    data.validate();
    return data;
}

model::LongitudinalDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path.string(), path.string());
    return read_dataset(in, path.string());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string(), tmp.string());
        out << content;
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failed: " + tmp.string(), tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("atomic rename failed: " + path.string(), path.string());
    }
}

void write_dataset(const model::LongitudinalDataset& dataset,
                   const std::filesystem::path& path) {
    dataset.validate();
    std::ostringstream os;
    os << "subject_id,time,response";
    for (int j = 1; j <= dataset.d_w; ++j) os << ",z" << j;
    for (int j = 1; j <= dataset.d_beta; ++j) os << ",x" << j;
    os << '\n';
    for (const auto& s : dataset.subjects) {
        for (int k = 0; k < s.visits(); ++k) {
            os << s.id << ',' << format_double(s.times[k]) << ','
               << format_double(s.response[k]);
            for (int j = 0; j < dataset.d_w; ++j) os << ',' << format_double(s.z(k, j));
            for (int j = 0; j < dataset.d_beta; ++j) os << ',' << format_double(s.x(k, j));
            os << '\n';
        }
    }
    write_text_atomic(path, os.str());
}

namespace {

nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

Eigen::VectorXd json_to_vec(const nlohmann::json& a) {
    Eigen::VectorXd v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[i] = a[i].get<double>();
    return v;
}

}  // namespace

void write_fit(const estimator::ModelFit& fit, const std::filesystem::path& path) {
    nlohmann::json js;
    js["format_version"] = std::string(kFitFormatVersion);
    js["link"] = fit.link == model::LinkFamily::logit ? "logit" : "identity";
    js["beta"] = vec_to_json(fit.beta);
    js["beta_se"] = vec_to_json(fit.beta_se);
    js["lambda"] = vec_to_json(fit.lambda);
    js["basis"] = {{"order", fit.basis.order},
                   {"interior_knots", fit.basis.interior_knot_count},
                   {"lo", fit.basis.lo},
                   {"hi", fit.basis.hi}};
    js["standardizer"] = {{"mu", fit.standardizer.mu}, {"sigma", fit.standardizer.sigma}};
    js["covariance"] = {{"structure", fit.covariance == model::CovarianceStructure::exchangeable
                                          ? "exchangeable"
                                          : "independence"},
                        {"rho", fit.rho},
                        {"dispersion", fit.dispersion}};
    js["kernel"] = {{"family", fit.kernel.family == kernels::KernelFamily::gaussian
                                   ? "gaussian"
                                   : "epanechnikov"},
                    {"bandwidth", fit.kernel.bandwidth}};
    js["weights"] = {{"grid", vec_to_json(fit.weights.grid)}};
    nlohmann::json values = nlohmann::json::array();
    for (const auto& w : fit.weights.values) values.push_back(vec_to_json(w));
    js["weights"]["values"] = values;
    js["diagnostics"] = {{"outer_iterations", fit.diagnostics.outer_iterations},
                         {"step1_norm", fit.diagnostics.step1_norm},
                         {"step2_norm", fit.diagnostics.step2_norm},
                         {"step3_norm", fit.diagnostics.step3_norm},
                         {"nonneg_warnings", fit.diagnostics.nonneg_warnings},
                         {"converged", fit.diagnostics.converged},
                         {"interior_knots", fit.diagnostics.interior_knots},
                         {"bandwidth", fit.diagnostics.bandwidth}};
    write_text_atomic(path, js.dump(2) + "\n");
}

estimator::ModelFit read_fit(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fit file: " + path.string(), path.string());
    nlohmann::json js;
    try {
        in >> js;
    } catch (const std::exception& ex) {
        throw IoError("invalid fit JSON in " + path.string() + ": " + ex.what(), path.string());
    }
    if (js.value("format_version", "") != kFitFormatVersion)
        throw IoError("unsupported fit format version in " + path.string(), path.string());
    estimator::ModelFit fit;
    fit.link = js.at("link").get<std::string>() == "logit" ? model::LinkFamily::logit
                                                           : model::LinkFamily::identity;
    fit.beta = json_to_vec(js.at("beta"));
    fit.beta_se = json_to_vec(js.at("beta_se"));
    fit.lambda = json_to_vec(js.at("lambda"));
    fit.basis = splines::build_basis(js.at("basis").at("order").get<int>(),
                                     js.at("basis").at("interior_knots").get<int>(),
                                     js.at("basis").at("lo").get<double>(),
                                     js.at("basis").at("hi").get<double>());
    fit.standardizer.mu = js.at("standardizer").at("mu").get<double>();
    fit.standardizer.sigma = js.at("standardizer").at("sigma").get<double>();
    fit.covariance = js.at("covariance").at("structure").get<std::string>() == "exchangeable"
                         ? model::CovarianceStructure::exchangeable
                         : model::CovarianceStructure::independence;
    fit.rho = js.at("covariance").at("rho").get<double>();
    fit.dispersion = js.at("covariance").at("dispersion").get<double>();
    fit.kernel.family = js.at("kernel").at("family").get<std::string>() == "gaussian"
                            ? kernels::KernelFamily::gaussian
                            : kernels::KernelFamily::epanechnikov;
    fit.kernel.bandwidth = js.at("kernel").at("bandwidth").get<double>();
    fit.weights.grid = json_to_vec(js.at("weights").at("grid"));
    for (const auto& w : js.at("weights").at("values"))
        fit.weights.values.push_back(json_to_vec(w));
    const auto& diag = js.at("diagnostics");
    fit.diagnostics.outer_iterations = diag.at("outer_iterations").get<int>();
    fit.diagnostics.step1_norm = diag.at("step1_norm").get<double>();
    fit.diagnostics.step2_norm = diag.at("step2_norm").get<double>();
    fit.diagnostics.step3_norm = diag.at("step3_norm").get<double>();
    fit.diagnostics.nonneg_warnings = diag.at("nonneg_warnings").get<int>();
    fit.diagnostics.converged = diag.at("converged").get<bool>();
    fit.diagnostics.interior_knots = diag.at("interior_knots").get<int>();
    fit.diagnostics.bandwidth = diag.at("bandwidth").get<double>();
    fit.weights.validate();
    return fit;
}

void write_band_csv(const std::filesystem::path& path, const std::vector<NamedBand>& bands) {
    std::ostringstream os;
    os << "target,grid,estimate,se,lower,upper,truth\n";
    for (const auto& nb : bands) {
        for (Eigen::Index g = 0; g < nb.band.grid.size(); ++g) {
            os << nb.target << ',' << format_double(nb.band.grid[g]) << ','
               << format_double(nb.band.estimate[g]) << ',' << format_double(nb.band.se[g])
               << ',' << format_double(nb.band.lower[g]) << ','
               << format_double(nb.band.upper[g]) << ',';
            if (static_cast<std::size_t>(g) < nb.truth.size())
                os << format_double(nb.truth[g]);
            os << '\n';
        }
    }
    write_text_atomic(path, os.str());
}

void write_monte_carlo_summary_csv(const std::filesystem::path& path,
                                   const simulate::MonteCarloSummary& s) {
    std::ostringstream os;
    os << "coefficient,true,mean,bias,sd,se_mean,mse,cp\n";
    for (Eigen::Index j = 0; j < s.beta_true.size(); ++j) {
        os << "beta" << (j + 1) << ',' << format_double(s.beta_true[j]) << ','
           << format_double(s.beta_mean[j]) << ','
           << format_double(s.beta_mean[j] - s.beta_true[j]) << ','
           << format_double(s.beta_sd[j]) << ',' << format_double(s.beta_se_mean[j]) << ','
           << format_double(s.beta_mse[j]) << ',' << format_double(s.beta_cp[j]) << '\n';
    }
    write_text_atomic(path, os.str());
}

std::string monte_carlo_summary_json(const simulate::MonteCarloSummary& s) {
    nlohmann::json js;
    js["setting_id"] = s.setting_id;
    js["n"] = s.n;
    js["replications"] = s.replications;
    js["failures"] = s.failures;
    js["seed"] = s.seed;
    js["beta_true"] = vec_to_json(s.beta_true);
    js["beta_mean"] = vec_to_json(s.beta_mean);
    js["beta_sd"] = vec_to_json(s.beta_sd);
    js["beta_se_mean"] = vec_to_json(s.beta_se_mean);
    js["beta_mse"] = vec_to_json(s.beta_mse);
    js["beta_cp"] = vec_to_json(s.beta_cp);
    js["median_beta_err_inf"] = s.median_beta_err_inf;
    if (s.has_band_coverage) {
        js["w_band_coverage"] = s.w_band_coverage;
        js["m_band_coverage"] = s.m_band_coverage;
        js["median_sup_m_err"] = s.median_sup_m_err;
        js["median_sup_w_err"] = s.median_sup_w_err;
    }
    js["manifest_hash"] = s.manifest_hash;
    js["manifest"] = nlohmann::json::parse(simulate::settings_manifest_json());
    return js.dump(2) + "\n";
}

void write_curves_csv(const std::filesystem::path& path,
                      const std::vector<evaluate::PredictiveErrorCurve>& curves) {
    std::ostringstream os;
    os << "model,bin_center,mspe,lo,hi\n";
    for (const auto& c : curves) {
        for (Eigen::Index b = 0; b < c.bin_centers.size(); ++b) {
            os << c.model << ',' << format_double(c.bin_centers[b]) << ',';
            if (!std::isnan(c.mspe[b]))
                os << format_double(c.mspe[b]) << ',' << format_double(c.lo[b]) << ','
                   << format_double(c.hi[b]);
            else
                os << ",,";
            os << '\n';
        }
    }
    write_text_atomic(path, os.str());
}

std::string curves_summary_json(const evaluate::CrossValidationResult& result) {
    nlohmann::json js;
    js["folds"] = result.folds;
    js["repeats"] = result.repeats;
    js["bin_edges"] = vec_to_json(result.bin_edges);
    nlohmann::json aucs = nlohmann::json::object();
    for (const auto& c : result.curves) aucs[c.model] = c.auc;
    js["auc"] = aucs;
    return js.dump(2) + "\n";
}

}  // namespace indexfuse::io
