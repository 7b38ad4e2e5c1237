/* A small deflate-flavoured compressor: CRC, LZ77 matching, Huffman code
 * lengths, bit output and a few command-line helpers. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define WSIZE 4096
#define HASH_BITS 12
#define HASH_SIZE (1 << HASH_BITS)
#define MIN_MATCH 3
#define MAX_MATCH 258
#define NSYMS 286
#define MAX_BITS 15

unsigned int crc_table[256];
unsigned short head[HASH_SIZE];
unsigned short prev[WSIZE];
unsigned int freq[NSYMS];
unsigned char lengths[NSYMS];
unsigned int codes[NSYMS];

struct bitbuf {
	unsigned char *out;
	size_t pos;
	size_t cap;
	unsigned int acc;
	int nbits;
};

int verbose;
int level = 6;

void make_crc_table(void)
{
	for (unsigned int n = 0; n < 256; n++) {
		unsigned int c = n;
		for (int k = 0; k < 8; k++)
			c = c & 1 ? 0xedb88320u ^ (c >> 1) : c >> 1;
		crc_table[n] = c;
	}
}

unsigned int update_crc(unsigned int crc, const unsigned char *buf, size_t len)
{
	unsigned int c = crc ^ 0xffffffffu;
	for (size_t i = 0; i < len; i++)
		c = crc_table[(c ^ buf[i]) & 0xff] ^ (c >> 8);
	return c ^ 0xffffffffu;
}

unsigned int adler32(const unsigned char *buf, size_t len)
{
	unsigned int a = 1, b = 0;
	while (len > 0) {
		size_t chunk = len < 5552 ? len : 5552;
		len -= chunk;
		while (chunk--) {
			a += *buf++;
			b += a;
		}
		a %= 65521;
		b %= 65521;
	}
	return (b << 16) | a;
}

void bits_init(struct bitbuf *bb, unsigned char *out, size_t cap)
{
	bb->out = out;
	bb->pos = 0;
	bb->cap = cap;
	bb->acc = 0;
	bb->nbits = 0;
}

int put_bits(struct bitbuf *bb, unsigned int value, int count)
{
	bb->acc |= value << bb->nbits;
	bb->nbits += count;
	while (bb->nbits >= 8) {
		if (bb->pos >= bb->cap)
			return -1;
		bb->out[bb->pos++] = (unsigned char)(bb->acc & 0xff);
		bb->acc >>= 8;
		bb->nbits -= 8;
	}
	return 0;
}

int flush_bits(struct bitbuf *bb)
{
	if (bb->nbits > 0) {
		if (bb->pos >= bb->cap)
			return -1;
		bb->out[bb->pos++] = (unsigned char)(bb->acc & 0xff);
	}
	bb->acc = 0;
	bb->nbits = 0;
	return 0;
}

unsigned int reverse_bits(unsigned int code, int len)
{
	unsigned int res = 0;
	do {
		res |= code & 1;
		code >>= 1;
		res <<= 1;
	} while (--len > 0);
	return res >> 1;
}

unsigned int hash3(const unsigned char *p)
{
	return ((p[0] << 8) ^ (p[1] << 4) ^ p[2]) & (HASH_SIZE - 1);
}

void reset_window(void)
{
	memset(head, 0, sizeof head);
	memset(prev, 0, sizeof prev);
}

void insert_string(const unsigned char *buf, size_t pos)
{
	unsigned int h = hash3(buf + pos);
	prev[pos & (WSIZE - 1)] = head[h];
	head[h] = (unsigned short)pos;
}

int match_length(const unsigned char *a, const unsigned char *b, int limit)
{
	int n = 0;
	while (n < limit && a[n] == b[n])
		n++;
	return n;
}

int longest_match(const unsigned char *buf, size_t pos, size_t len, int *dist)
{
	int best = 0;
	int chain = level > 5 ? 128 : 16;
	unsigned int cur = head[hash3(buf + pos)];
	int limit = len - pos < MAX_MATCH ? (int)(len - pos) : MAX_MATCH;
	while (cur > 0 && chain-- > 0) {
		if (pos - cur > WSIZE - 1)
			break;
		int n = match_length(buf + cur, buf + pos, limit);
		if (n > best) {
			best = n;
			*dist = (int)(pos - cur);
			if (n >= limit)
				break;
		}
		cur = prev[cur & (WSIZE - 1)];
	}
	return best >= MIN_MATCH ? best : 0;
}

int length_code(int len)
{
	if (len < 11)
		return 257 + (len - 3);
	if (len < 19)
		return 265 + (len - 11) / 2;
	if (len < 35)
		return 269 + (len - 19) / 4;
	if (len < 67)
		return 273 + (len - 35) / 8;
	if (len < 131)
		return 277 + (len - 67) / 16;
	return len == 258 ? 285 : 281 + (len - 131) / 32;
}

int dist_code(int dist)
{
	int code = 0;
	int d = dist - 1;
	while (d >= 4) {
		d >>= 1;
		code += 2;
	}
	return code + d;
}

size_t lz77_count(const unsigned char *buf, size_t len)
{
	size_t pos = 0;
	size_t tokens = 0;
	reset_window();
	memset(freq, 0, sizeof freq);
	while (pos < len) {
		int dist = 0;
		int n = pos + MIN_MATCH <= len ? longest_match(buf, pos, len, &dist) : 0;
		if (n) {
			freq[length_code(n)]++;
			for (int k = 0; k < n; k++)
				if (pos + k + MIN_MATCH <= len)
					insert_string(buf, pos + k);
			pos += n;
		} else {
			freq[buf[pos]]++;
			if (pos + MIN_MATCH <= len)
				insert_string(buf, pos);
			pos++;
		}
		tokens++;
	}
	freq[256]++;
	return tokens;
}

void sort_symbols(int *order, int n)
{
	for (int i = 1; i < n; i++) {
		int s = order[i];
		int j = i - 1;
		while (j >= 0 && (freq[order[j]] > freq[s] ||
				  (freq[order[j]] == freq[s] && order[j] > s))) {
			order[j + 1] = order[j];
			j--;
		}
		order[j + 1] = s;
	}
}

int build_lengths(void)
{
	int order[NSYMS];
	int n = 0;
	for (int s = 0; s < NSYMS; s++) {
		lengths[s] = 0;
		if (freq[s])
			order[n++] = s;
	}
	if (n == 0)
		return 0;
	sort_symbols(order, n);
	for (int i = 0; i < n; i++) {
		int depth = 1;
		unsigned int rank = (unsigned int)(n - i);
		while (rank > 1) {
			rank >>= 1;
			depth++;
		}
		lengths[order[i]] = (unsigned char)(depth > MAX_BITS ? MAX_BITS : depth);
	}
	return n;
}

void assign_codes(void)
{
	unsigned int bl_count[MAX_BITS + 1] = {0};
	unsigned int next_code[MAX_BITS + 1];
	unsigned int code = 0;
	for (int s = 0; s < NSYMS; s++)
		bl_count[lengths[s]]++;
	bl_count[0] = 0;
	for (int bits = 1; bits <= MAX_BITS; bits++) {
		code = (code + bl_count[bits - 1]) << 1;
		next_code[bits] = code;
	}
	for (int s = 0; s < NSYMS; s++) {
		int len = lengths[s];
		codes[s] = len ? reverse_bits(next_code[len]++, len) : 0;
	}
}

size_t encode_stored(const unsigned char *buf, size_t len, unsigned char *out, size_t cap)
{
	struct bitbuf bb;
	bits_init(&bb, out, cap);
	if (put_bits(&bb, 1, 3) < 0 || flush_bits(&bb) < 0)
		return 0;
	if (bb.pos + 4 + len > cap)
		return 0;
	out[bb.pos++] = len & 0xff;
	out[bb.pos++] = (len >> 8) & 0xff;
	out[bb.pos++] = ~len & 0xff;
	out[bb.pos++] = (~len >> 8) & 0xff;
	memcpy(out + bb.pos, buf, len);
	return bb.pos + len;
}

size_t encode_literals(const unsigned char *buf, size_t len, unsigned char *out, size_t cap)
{
	struct bitbuf bb;
	bits_init(&bb, out, cap);
	if (put_bits(&bb, 3, 3) < 0)
		return 0;
	for (size_t i = 0; i < len; i++) {
		int s = buf[i];
		if (lengths[s] == 0)
			return 0;
		if (put_bits(&bb, codes[s], lengths[s]) < 0)
			return 0;
	}
	if (put_bits(&bb, codes[256], lengths[256]) < 0 || flush_bits(&bb) < 0)
		return 0;
	return bb.pos;
}

int run_length(const unsigned char *buf, size_t len, unsigned char *out, size_t cap)
{
	size_t o = 0;
	size_t i = 0;
	while (i < len) {
		unsigned char c = buf[i];
		size_t run = 1;
		while (i + run < len && buf[i + run] == c && run < 255)
			run++;
		if (o + 2 > cap)
			return -1;
		out[o++] = (unsigned char)run;
		out[o++] = c;
		i += run;
	}
	return (int)o;
}

int is_text(const unsigned char *buf, size_t len)
{
	size_t odd = 0;
	for (size_t i = 0; i < len; i++) {
		unsigned char c = buf[i];
		if (c == '\n' || c == '\r' || c == '\t')
			continue;
		if (c < 32 || c > 126)
			odd++;
	}
	return odd * 10 < len;
}

const char *method_name(int method)
{
	switch (method) {
	case 0:
		return "stored";
	case 1:
		return "fixed";
	case 2:
		return "dynamic";
	default:
		return "unknown";
	}
}

int parse_level(const char *arg)
{
	if (arg[0] != '-' || arg[1] < '1' || arg[1] > '9' || arg[2] != '\0')
		return -1;
	return arg[1] - '0';
}

int parse_args(int argc, char **argv, const char **input)
{
	*input = NULL;
	for (int i = 1; i < argc; i++) {
		if (strcmp(argv[i], "-v") == 0) {
			verbose++;
		} else if (parse_level(argv[i]) > 0) {
			level = parse_level(argv[i]);
		} else if (argv[i][0] == '-') {
			fprintf(stderr, "unknown option %s\n", argv[i]);
			return -1;
		} else {
			*input = argv[i];
		}
	}
	return *input ? 0 : -1;
}

unsigned char *read_file(const char *path, size_t *len)
{
	FILE *f = fopen(path, "rb");
	if (!f)
		return NULL;
	size_t cap = 4096, n = 0;
	unsigned char *buf = malloc(cap);
	while (buf) {
		size_t got = fread(buf + n, 1, cap - n, f);
		n += got;
		if (got == 0)
			break;
		if (n == cap) {
			unsigned char *bigger = realloc(buf, cap * 2);
			if (!bigger) {
				free(buf);
				buf = NULL;
				break;
			}
			buf = bigger;
			cap *= 2;
		}
	}
	fclose(f);
	*len = n;
	return buf;
}

int choose_method(const unsigned char *buf, size_t len)
{
	if (len < 64)
		return 0;
	size_t tokens = lz77_count(buf, len);
	if (tokens * 4 > len * 3)
		return is_text(buf, len) ? 1 : 0;
	return 2;
}

void report(const char *name, size_t in, size_t out, unsigned int crc, int method)
{
	double ratio = in ? 100.0 * (double)out / (double)in : 0.0;
	printf("%s: %zu -> %zu (%.1f%%) crc %08x %s\n", name, in, out, ratio, crc, method_name(method));
	if (verbose > 1)
		printf("  adler %08x level %d\n", adler32((const unsigned char *)name, strlen(name)), level);
}

int main(int argc, char **argv)
{
	const char *input;
	if (parse_args(argc, argv, &input) < 0) {
		fprintf(stderr, "usage: %s [-1..-9] [-v] file\n", argv[0]);
		return 2;
	}
	size_t len;
	unsigned char *buf = read_file(input, &len);
	if (!buf) {
		perror(input);
		return 1;
	}
	make_crc_table();
	unsigned int crc = update_crc(0, buf, len);
	int method = choose_method(buf, len);
	size_t cap = len * 2 + 64;
	unsigned char *out = malloc(cap);
	size_t produced = 0;
	if (out) {
		if (method == 0) {
			produced = encode_stored(buf, len, out, cap);
		} else {
			build_lengths();
			assign_codes();
			produced = encode_literals(buf, len, out, cap);
			if (produced == 0)
				produced = encode_stored(buf, len, out, cap);
		}
		if (verbose) {
			int rle = run_length(buf, len, out, cap);
			printf("rle %d dist(%d) %d\n", rle, 100, dist_code(100));
		}
	}
	report(input, len, produced, crc, method);
	free(out);
	free(buf);
	return 0;
}
