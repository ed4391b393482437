#include "pgsam/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "pgsam/data.hpp"

namespace pgsam::report {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

int modality_rank(const std::string& m) {
    for (std::size_t i = 0; i < data::kSequenceNames.size(); ++i)
        if (data::kSequenceNames[i] == m) return static_cast<int>(i);
    return static_cast<int>(data::kSequenceNames.size());
}

namespace {

bool key_less(const std::string& sa, const std::string& ma, const std::string& sb, const std::string& mb) {
    if (sa != sb) return sa < sb;
    const int ra = modality_rank(ma), rb = modality_rank(mb);
    if (ra != rb) return ra < rb;
    return ma < mb;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

std::string json_str(const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"' || ch == '\\') out.push_back('\\');
        out.push_back(ch);
    }
    return out + "\"";
}

std::string json_num(const std::optional<double>& v) { return v ? fmt(*v) : "null"; }

}  // namespace

std::vector<Aggregate> MetricReport::aggregates() const {
    struct Acc {
        std::size_t n = 0, nh = 0, nr = 0;
        double dsc = 0, hd = 0, acc = 0, rec = 0;
    };
    std::map<std::pair<std::string, std::string>, Acc> groups;
    for (const auto& r : rows) {
        auto& a = groups[{r.site, r.modality}];
        ++a.n;
        a.dsc += r.dsc;
        a.acc += r.acc;
        if (r.hd95) {
            ++a.nh;
            a.hd += *r.hd95;
        }
        if (r.rec) {
            ++a.nr;
            a.rec += *r.rec;
        }
    }
    std::vector<Aggregate> out;
    for (const auto& [key, a] : groups) {
        Aggregate g;
        g.site = key.first;
        g.modality = key.second;
        g.n = a.n;
        g.dsc = a.dsc / double(a.n);
        g.acc = a.acc / double(a.n);
        if (a.nh) g.hd95 = a.hd / double(a.nh);
        if (a.nr) g.rec = a.rec / double(a.nr);
        g.hd95_undefined = a.n - a.nh;
        g.rec_undefined = a.n - a.nr;
        out.push_back(g);
    }
    std::sort(out.begin(), out.end(),
              [](const Aggregate& a, const Aggregate& b) { return key_less(a.site, a.modality, b.site, b.modality); });
    return out;
}

double MetricReport::mean_dsc() const {
    if (rows.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : rows) s += r.dsc;
    return s / double(rows.size());
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
    auto os = open_out(path);
    os << "# count=" << rows.size() << "\n";
    os << "site,modality,slice_id,dsc,hd95,acc,rec\n";
    for (const auto& r : rows)
        os << r.site << "," << r.modality << "," << r.slice_id << "," << fmt(r.dsc) << "," << fmt(r.hd95) << ","
           << fmt(r.acc) << "," << fmt(r.rec) << "\n";
}

void MetricReport::write_summary_csv(const std::filesystem::path& path) const {
    auto os = open_out(path);
    os << "# count=" << rows.size() << "\n";
    os << "site,modality,n,DSC,HD95,ACC,REC,hd95_undefined,rec_undefined\n";
    for (const auto& a : aggregates())
        os << a.site << "," << a.modality << "," << a.n << "," << fmt(a.dsc) << "," << fmt(a.hd95) << ","
           << fmt(a.acc) << "," << fmt(a.rec) << "," << a.hd95_undefined << "," << a.rec_undefined << "\n";
}

std::string MetricReport::to_json() const {
    std::ostringstream os;
    os << "{\n  \"count\": " << rows.size() << ",\n  \"mean_dsc\": " << fmt(mean_dsc()) << ",\n  \"aggregates\": [";
    const auto aggs = aggregates();
    for (std::size_t i = 0; i < aggs.size(); ++i) {
        const auto& a = aggs[i];
        os << (i ? "," : "") << "\n    {\"site\": " << json_str(a.site) << ", \"modality\": " << json_str(a.modality)
           << ", \"n\": " << a.n << ", \"DSC\": " << fmt(a.dsc) << ", \"HD95\": " << json_num(a.hd95)
           << ", \"ACC\": " << fmt(a.acc) << ", \"REC\": " << json_num(a.rec)
           << ", \"hd95_undefined\": " << a.hd95_undefined << ", \"rec_undefined\": " << a.rec_undefined << "}";
    }
    os << (aggs.empty() ? "" : "\n  ") << "],\n  \"rows\": [";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        os << (i ? "," : "") << "\n    {\"site\": " << json_str(r.site) << ", \"modality\": " << json_str(r.modality)
           << ", \"slice_id\": " << json_str(r.slice_id) << ", \"dsc\": " << fmt(r.dsc)
           << ", \"hd95\": " << json_num(r.hd95) << ", \"acc\": " << fmt(r.acc) << ", \"rec\": " << json_num(r.rec)
           << "}";
    }
    os << (rows.empty() ? "" : "\n  ") << "]\n}\n";
    return os.str();
}

void MetricReport::write_json(const std::filesystem::path& path) const {
    auto os = open_out(path);
    os << to_json();
}

void write_module_table(const std::filesystem::path& path, const std::vector<AblationCell>& cells) {
    auto os = open_out(path);
    os << "CAM,TPM,Site,modality,DSC,seeds\n";
    for (const auto& c : cells)
        os << (c.cam ? "on" : "off") << "," << (c.tpm ? "on" : "off") << "," << c.site << "," << c.modality << ","
           << fmt(c.dsc) << "," << c.seeds << "\n";
}

void write_prompt_table(const std::filesystem::path& path, const std::vector<AblationCell>& cells) {
    auto os = open_out(path);
    os << "Prompt,Site,modality,DSC,seeds\n";
    for (const auto& c : cells)
        os << c.prompt << "," << c.site << "," << c.modality << "," << fmt(c.dsc) << "," << c.seeds << "\n";
}

}  // namespace pgsam::report
