// CLI entry point: fit / simulate / bands / compare / validate.
#include <iostream>

int main() {
    std::cout << "placeholder\n";
    return 0;
}
