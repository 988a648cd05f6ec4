#include <cstring>
#include <fstream>
#include <map>

#include "clda/teacher_student/trainer.hpp"

namespace clda {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'D', 'A', 'C', 'K', 'P', 'T'};

class Writer {
public:
    explicit Writer(const std::filesystem::path& f) : out_(f, std::ios::binary) {
        if (!out_) throw CheckpointError("cannot write " + f.string());
    }
    template <class T>
    void pod(const T& v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        pod(static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) pod(static_cast<std::int32_t>(d));
        pod(static_cast<std::uint64_t>(t.data.size()));
        out_.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    void doubles(const std::string& name, const std::vector<double>& v) {
        str(name);
        pod(static_cast<std::uint64_t>(v.size()));
        out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    void finish() {
        out_.flush();
        if (!out_) throw CheckpointError("checkpoint write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& f) : in_(f, std::ios::binary), name_(f.string()) {
        if (!in_) throw CheckpointError("cannot open " + f.string());
    }
    template <class T>
    T pod() {
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in_) throw CheckpointError(name_ + ": truncated checkpoint");
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (n > (1u << 20)) throw CheckpointError(name_ + ": corrupt string length");
        std::string s(n, '\0');
        in_.read(s.data(), n);
        if (!in_) throw CheckpointError(name_ + ": truncated checkpoint");
        return s;
    }
    Tensor tensor() {
        Tensor t;
        const auto rank = pod<std::uint32_t>();
        if (rank > 8) throw CheckpointError(name_ + ": corrupt tensor rank");
        for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(pod<std::int32_t>());
        const auto n = pod<std::uint64_t>();
        if (n != 0 && n != Tensor::count(t.shape)) throw CheckpointError(name_ + ": tensor size mismatch");
        t.data.resize(n);
        in_.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in_) throw CheckpointError(name_ + ": truncated checkpoint");
        return t;
    }
    std::vector<double> doubles() {
        const auto n = pod<std::uint64_t>();
        if (n > (1ull << 32)) throw CheckpointError(name_ + ": corrupt array length");
        std::vector<double> v(n);
        in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in_) throw CheckpointError(name_ + ": truncated checkpoint");
        return v;
    }

private:
    std::ifstream in_;
    std::string name_;
};

CheckpointInfo read_header(Reader& r) {
    char magic[8];
    for (char& c : magic) c = r.pod<char>();
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file");
    CheckpointInfo info;
    info.version = r.pod<std::uint32_t>();
    if (info.version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(info.version));
    info.config_hash = r.pod<std::uint64_t>();
    info.phase = r.pod<std::int32_t>() == 0 ? Phase::BurnIn : Phase::Adapt;
    info.step = r.pod<std::int32_t>();
    return info;
}

std::string queue_key(DomainTag d, Stage s, int level) {
    return std::string("queue/") + to_string(d) + "/" + to_string(s) + "/" + std::to_string(level);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const Trainer& t) {
    const std::filesystem::path tmp = file.string() + ".tmp";
    {
        Writer w(tmp);
        for (char c : kMagic) w.pod(c);
        w.pod(kCheckpointVersion);
        w.pod(t.config().detector.hash());
        w.pod(static_cast<std::int32_t>(t.state().phase == Phase::BurnIn ? 0 : 1));
        w.pod(static_cast<std::int32_t>(t.state().step));
        w.pod(t.state().seed);

        std::vector<std::pair<std::string, const Tensor*>> tensors;
        for (const nn::Parameter* p : t.student().parameters()) tensors.emplace_back("student/" + p->name, &p->value);
        for (const nn::Parameter* p : t.teacher().parameters()) tensors.emplace_back("teacher/" + p->name, &p->value);
        for (const nn::Parameter* p : t.disc_parameters()) tensors.emplace_back("disc/" + p->name, &p->value);
        const auto& sv = t.optimizer().velocity();
        const auto& dv = t.disc_optimizer().velocity();
        for (std::size_t i = 0; i < sv.size(); ++i) tensors.emplace_back("opt/student/" + std::to_string(i), &sv[i]);
        for (std::size_t i = 0; i < dv.size(); ++i) tensors.emplace_back("opt/disc/" + std::to_string(i), &dv[i]);
        w.pod(static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, ten] : tensors) w.tensor(name, *ten);

        std::vector<std::pair<std::string, std::vector<double>>> arrays;
        const GainState& g = t.gain();
        arrays.push_back({"gain", {g.gain, g.baseline, g.frozen ? 1.0 : 0.0, g.warmup_sum,
                                   static_cast<double>(g.warmup_count), static_cast<double>(g.updates)}});
        arrays.push_back({"temperature", {t.temperature()}});
        for (const DomainQueue* q : t.queues().all()) {
            std::vector<double> rows;
            const auto entries = q->entries();
            const double dim = entries.empty() ? 0.0 : static_cast<double>(entries[0].feature.size());
            rows.push_back(dim);
            for (const InstanceFeature& f : entries) {
                rows.push_back(f.confidence);
                rows.push_back(f.category);
                rows.insert(rows.end(), f.feature.begin(), f.feature.end());
            }
            arrays.push_back({queue_key(q->domain(), q->stage(), q->level()), std::move(rows)});
        }
        w.pod(static_cast<std::uint32_t>(arrays.size()));
        for (const auto& [name, v] : arrays) w.doubles(name, v);
        w.finish();
    }
    std::filesystem::rename(tmp, file);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& file) {
    Reader r(file);
    return read_header(r);
}

void load_checkpoint(const std::filesystem::path& file, Trainer& t) {
    Reader r(file);
    const CheckpointInfo info = read_header(r);
    if (info.config_hash != t.config().detector.hash())
        throw CheckpointError("checkpoint was written for a different detector configuration");
    const auto seed = r.pod<std::uint64_t>();

    std::map<std::string, Tensor> tensors;
    const auto nt = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < nt; ++i) {
        std::string name = r.str();
        tensors[name] = r.tensor();
    }
    std::map<std::string, std::vector<double>> arrays;
    const auto na = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < na; ++i) {
        std::string name = r.str();
        arrays[name] = r.doubles();
    }

    auto restore = [&](const std::string& prefix, const nn::ParamList& params) {
        for (nn::Parameter* p : params) {
            auto it = tensors.find(prefix + p->name);
            if (it == tensors.end()) throw CheckpointError("checkpoint lacks " + prefix + p->name);
            if (!it->second.same_shape(p->value)) throw CheckpointError("shape mismatch for " + prefix + p->name);
            p->value = it->second;
        }
    };
    restore("student/", t.student().parameters());
    restore("teacher/", t.teacher().parameters());
    restore("disc/", t.disc_parameters());

    auto velocity = [&](const std::string& prefix, std::vector<Tensor>& out) {
        out.clear();
        for (std::size_t i = 0;; ++i) {
            auto it = tensors.find(prefix + std::to_string(i));
            if (it == tensors.end()) break;
            out.push_back(it->second);
        }
    };
    velocity("opt/student/", t.optimizer().velocity());
    velocity("opt/disc/", t.disc_optimizer().velocity());

    const auto& g = arrays.at("gain");
    if (g.size() != 6) throw CheckpointError("corrupt gain record");
    GainState& gs = t.gain();
    gs.cfg = t.config().gain;
    gs.gain = g[0];
    gs.baseline = g[1];
    gs.frozen = g[2] != 0.0;
    gs.warmup_sum = g[3];
    gs.warmup_count = static_cast<int>(g[4]);
    gs.updates = static_cast<int>(g[5]);
    t.temperature() = arrays.at("temperature").at(0);

    t.queues() = QueueBank(t.config().ca.queue_capacity);
    for (DomainTag d : {DomainTag::Source, DomainTag::Target})
        for (Stage s : {Stage::Backbone, Stage::Head})
            for (int l = 0; l < 3; ++l) {
                auto it = arrays.find(queue_key(d, s, l));
                if (it == arrays.end()) continue;
                const std::vector<double>& rows = it->second;
                const auto dim = static_cast<std::size_t>(rows.at(0));
                const std::size_t stride = dim + 2;
                if (dim == 0) continue;
                if ((rows.size() - 1) % stride != 0) throw CheckpointError("corrupt queue record " + it->first);
                DomainQueue& q = t.queues().get(d, s, l);
                for (std::size_t off = 1; off < rows.size(); off += stride) {
                    InstanceFeature f;
                    f.confidence = rows[off];
                    f.category = static_cast<int>(rows[off + 1]);
                    f.feature.assign(rows.begin() + static_cast<long>(off + 2), rows.begin() + static_cast<long>(off + stride));
                    f.domain = d;
                    f.stage = s;
                    f.level = l;
                    q.push(f);
                }
            }

    t.state().phase = info.phase;
    t.state().step = info.step;
    t.state().seed = seed;
}

}  // namespace clda
