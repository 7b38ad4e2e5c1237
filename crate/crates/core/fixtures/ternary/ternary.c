#include <stdio.h>
#include <string.h>

int clamp_len(const char *s, int limit)
{
	int n = (int)strlen(s);
	int r = n > limit ? limit : n;
	return r;
}

int checksum(const char *s, int n)
{
	int sum = 0;
	for (int i = 0; i < n; i++) {
		if (s[i] == ' ')
			continue;
		sum = sum * 31 + s[i];
	}
	return sum;
}

int main(int argc, char **argv)
{
	const char *word = argc > 1 ? argv[1] : "default";
	int n = clamp_len(word, 8);
	printf("%s %d %d\n", word, n, checksum(word, n));
	return 0;
}
